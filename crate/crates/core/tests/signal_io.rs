use uwloc_core::signal_io::{
    attach_labels, load_multichannel_audio, segment_clip, sidecar_path, write_raw, ArrayTag, LabelTable,
    MultiChannelClip,
};
use uwloc_core::Error;

fn write_wav(path: &std::path::Path, channels: u16, rate: u32, frames: &[Vec<i16>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for f in frames {
        for &s in f {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn wav_pcm16_is_scaled_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let frames: Vec<Vec<i16>> = (0..3000).map(|i| vec![if i == 0 { 32767 } else { 0 }, -32768]).collect();
    write_wav(&path, 2, 1500, &frames);
    let clip = load_multichannel_audio(&path, Some(1500.0)).unwrap();
    assert_eq!((clip.channels(), clip.frames()), (2, 3000));
    assert_eq!(clip.samples()[0][0], 32767.0 / 32768.0);
    assert_eq!(clip.samples()[1][5], -1.0);
    assert!(matches!(
        load_multichannel_audio(&path, Some(2000.0)),
        Err(Error::RateMismatch { .. })
    ));
}

#[test]
fn mono_wav_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wav");
    write_wav(&path, 1, 1500, &vec![vec![0]; 1500]);
    assert!(matches!(
        load_multichannel_audio(&path, None),
        Err(Error::InsufficientChannels(1))
    ));
}

#[test]
fn raw_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.f32");
    let samples = vec![
        (0..1700).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>(),
        (0..1700).map(|i| -(i as f32) * 1e-3).collect(),
    ];
    let clip = MultiChannelClip::new(samples, 1500.0, ArrayTag::Vla).unwrap();
    write_raw(&clip, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    assert_eq!(load_multichannel_audio(&path, None).unwrap(), clip);
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    assert!(load_multichannel_audio(&path, None).is_err());
}

#[test]
fn unknown_extension_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_multichannel_audio(&dir.path().join("x.mp3"), None).is_err());
    assert!(matches!(
        load_multichannel_audio(&dir.path().join("x.wav"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn seventy_five_minutes_make_4500_labeled_segments() {
    let n = 75 * 60 * 1500;
    let clip = MultiChannelClip::new(vec![vec![0.0; n]; 2], 1500.0, ArrayTag::Synth).unwrap();
    let segs = segment_clip(&clip).unwrap();
    assert_eq!(segs.len(), 4500);
    let table = LabelTable::new((0..=75).map(|m| (m, 9.0 - m as f64 * 0.1)).collect()).unwrap();
    let labeled = attach_labels(segs, &table).unwrap();
    assert_eq!(labeled.len(), 4500);
    assert_eq!(labeled[0].range_km, 9.0);
    // 90.5 s is nearest minute 2
    assert!((labeled[90].range_km - 8.8).abs() < 1e-12);
}

#[test]
fn label_csv_roundtrip_and_header_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.csv");
    let t = LabelTable::new(vec![(0, 3.5), (1, 3.25), (2, 3.0)]).unwrap();
    t.write_csv(&path).unwrap();
    assert_eq!(LabelTable::read_csv(&path).unwrap(), t);
    std::fs::write(&path, "time,range\n0,1.0\n").unwrap();
    assert!(LabelTable::read_csv(&path).is_err());
}
