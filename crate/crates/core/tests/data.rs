//! CSV contract, splits, synthetic corpora, batching and naive baselines.

use std::fs;

use flextsf::series::{
    batch, load_csv, make_synthetic, write_csv, Batch, Dataset, DatasetManifest, IrregularSeries, Segment, Split,
    SplitSpec, SynthConfig, SynthKind,
};
use flextsf::train::{baseline_forecast, BaselineKind};
use flextsf::Error;

#[test]
fn csv_round_trip_keeps_times_values_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = make_synthetic(SynthKind::DropMaskedSine, 20, (30, 50), 5);
    write_csv(&path, &ds.series).unwrap();
    let back = load_csv(&path, Some(ds.manifest.clone())).unwrap();
    assert_eq!(back.series.len(), ds.series.len());
    for (a, b) in ds.series.iter().zip(&back.series) {
        assert_eq!((&a.series_id, &a.channel, &a.times, &a.observed), (&b.series_id, &b.channel, &b.times, &b.observed));
        for i in 0..a.len() {
            if a.observed[i] {
                assert_eq!(a.values[i], b.values[i]);
            } else {
                assert!(b.values[i].is_nan());
            }
        }
    }
}

#[test]
fn multichannel_rows_become_separate_series() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "series_id,channel,time,value\na,x,0,1\na,y,0,10\na,x,60,2\na,y,60,\nb,x,0,5\n").unwrap();
    let ds = load_csv(&path, None).unwrap();
    let keys: Vec<(String, String)> = ds.series.iter().map(IrregularSeries::key).collect();
    assert_eq!(keys, vec![("a".into(), "x".into()), ("a".into(), "y".into()), ("b".into(), "x".into())]);
    assert_eq!(ds.series[1].observed, vec![true, false]);
    assert_eq!(ds.manifest.dataset_name, "m");
    // no time unit in the manifest: smallest positive gap
    assert_eq!(ds.time_unit(), 60.0);
}

#[test]
fn csv_errors_carry_file_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("series_id,channel,time,value\na,x,0,1\na,x,0,2\n", 3),
        ("series_id,channel,time,value\na,x,0,1\na,x,1,abc\n", 3),
        ("series_id,channel,time,value\na,x,zero,1\n", 2),
        ("id,channel,time,value\n", 1),
    ];
    for (i, (text, line)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.csv"));
        fs::write(&path, text).unwrap();
        match load_csv(&path, None) {
            Err(Error::Csv { row, .. }) => assert_eq!(row, *line, "case {i}"),
            other => panic!("case {i}: expected a CSV error, got {other:?}"),
        }
    }
    assert!(matches!(load_csv(&dir.path().join("missing.csv"), None), Err(Error::Io { .. })));
}

#[test]
fn manifest_round_trip_and_unit_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.toml");
    let mut m = DatasetManifest::new("etth");
    m.time_unit_seconds = Some(3600.0);
    m.channels.insert("OT".into(), flextsf::series::ChannelStats { mean: 12.0, std: 3.0 });
    m.split_seed = 4;
    m.write(&path).unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert_eq!(back, m);
    let ds = Dataset { series: vec![], manifest: back };
    assert_eq!(ds.time_unit(), 3600.0);

    fs::write(&path, "dataset_name = \"x\"\nunknown = 1\n").unwrap();
    assert!(matches!(DatasetManifest::read(&path), Err(Error::Config(_))));
}

#[test]
fn splits_follow_eight_one_one_and_are_disjoint() {
    let ds = make_synthetic(SynthKind::Sine, 1000, (60, 120), 1);
    let spec = SplitSpec::default();
    let counts: Vec<usize> =
        [Split::Train, Split::Val, Split::Test].iter().map(|&s| ds.split(s, &spec).len()).collect();
    assert_eq!(counts, vec![800, 100, 100]);
    let again = make_synthetic(SynthKind::Sine, 1000, (60, 120), 1);
    assert_eq!(ds.splits(&spec), again.splits(&spec));
}

#[test]
fn synthetic_corpora_match_their_settings() {
    let ds = make_synthetic(SynthKind::DropMaskedSine, 200, (60, 120), 3);
    // masked values are NaN, so compare bit patterns
    let bits = |d: &flextsf::series::Dataset| -> Vec<(Vec<u64>, Vec<u64>, Vec<bool>)> {
        d.series
            .iter()
            .map(|s| {
                (s.times.iter().map(|t| t.to_bits()).collect(), s.values.iter().map(|v| v.to_bits()).collect(), s.observed.clone())
            })
            .collect()
    };
    assert_eq!(bits(&ds), bits(&make_synthetic(SynthKind::DropMaskedSine, 200, (60, 120), 3)));
    for s in &ds.series {
        assert!((60..=120).contains(&s.len()));
        let masked = s.observed.iter().filter(|&&o| !o).count();
        assert_eq!(masked, (0.3 * s.len() as f64).round() as usize);
        // gaps are whole time units, at least one
        for w in s.times.windows(2) {
            let units = (w[1] - w[0]) / 3600.0;
            assert!(units >= 1.0 && units.fract() == 0.0);
        }
    }
    assert!(ds.series.iter().any(|s| s.times.windows(2).any(|w| w[1] - w[0] > 3600.0)));

    let fam = make_synthetic(SynthKind::SineFamily, 80, (60, 120), 3);
    let channels: std::collections::BTreeSet<&str> = fam.series.iter().map(|s| s.channel.as_str()).collect();
    assert_eq!(channels.len(), 8);
    let regular = SynthConfig { n_series: 5, ..SynthConfig::new(SynthKind::Sine, 5, (10, 10), 0) }.generate();
    assert!(regular.series.iter().all(|s| s.len() == 10 && s.observed.iter().all(|&o| o)));
    assert_eq!("sine-family".parse::<SynthKind>().unwrap(), SynthKind::SineFamily);
    assert!("cosine".parse::<SynthKind>().is_err());
}

#[test]
fn padding_is_invalid_and_recoverable() {
    let seg = |n: usize, t0: f64| Segment {
        times: (0..n).map(|i| t0 + i as f64).collect(),
        values: (0..n).map(|i| i as f64).collect(),
        observed: (0..n).map(|i| i % 3 != 1).collect(),
    };
    let rows = vec![
        flextsf::series::BatchRow { context: seg(5, 0.0), horizon: seg(2, 5.0), features: [1.0; 6] },
        flextsf::series::BatchRow { context: seg(9, 0.0), horizon: seg(3, 9.0), features: [2.0; 6] },
    ];
    let b = Batch::new(&rows);
    assert_eq!((b.rows, b.width), (2, 12));
    assert_eq!(b.valid_count(0), 7);
    assert!(b.valid[7..12].iter().all(|v| !v) && b.observed[7..12].iter().all(|o| !o));
    assert_eq!(b.row(0), rows[0]);
    assert_eq!(b.row(1), rows[1]);
    assert_eq!(batch(&rows, 1).len(), 2);
}

#[test]
fn baselines_on_a_line() {
    let ctx = Segment { times: vec![0.0, 1.0, 2.0, 3.0], values: vec![1.0, 3.0, 0.0, 7.0], observed: vec![true, true, false, true] };
    assert_eq!(baseline_forecast(BaselineKind::Mean, &ctx, &[4.0, 5.0]).unwrap(), vec![11.0 / 3.0; 2]);
    assert_eq!(baseline_forecast(BaselineKind::LastValue, &ctx, &[4.0]).unwrap(), vec![7.0]);
    // exact line y = 2t + 1 through the observed points
    let line = Segment { times: vec![0.0, 1.0, 3.0], values: vec![1.0, 3.0, 7.0], observed: vec![true; 3] };
    let pred = baseline_forecast(BaselineKind::LinearTrend, &line, &[4.0, 10.0]).unwrap();
    assert!((pred[0] - 9.0).abs() < 1e-12 && (pred[1] - 21.0).abs() < 1e-12);
    let empty = Segment { times: vec![0.0], values: vec![0.0], observed: vec![false] };
    assert!(baseline_forecast(BaselineKind::Mean, &empty, &[1.0]).is_err());
}
