use mimo_ra::harness::{
    emit, emit_to_path, load_config, preset_points, run_sweep, Cell, Format, ResultRow, Scale,
    SimConfig, SweepPoint,
};

fn small_rows(seed: u64, workers: Option<usize>) -> Vec<ResultRow> {
    let cfg = SimConfig {
        seed,
        trials: 6,
        ..SimConfig::default()
    };
    let mut pts = vec![SweepPoint::from_config(&cfg, 32)];
    pts.extend(preset_points("fig8", Scale::Desk, &cfg, None).unwrap().into_iter().take(2));
    pts.extend(preset_points("fig4", Scale::Desk, &cfg, Some(3)).unwrap().into_iter().take(2));
    run_sweep(&cfg, &pts, workers).unwrap()
}

fn csv_of(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    emit(rows, Format::Csv, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn single_row_csv_has_two_lines() {
    let rows = small_rows(3, Some(2));
    let text = csv_of(&rows[..1]);
    assert_eq!(text.lines().count(), 2);
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header[0], "experiment");
    assert_eq!(header.len(), rows[0].cells().len());
}

#[test]
fn same_seed_is_byte_identical_across_workers() {
    let a = csv_of(&small_rows(11, Some(1)));
    let b = csv_of(&small_rows(11, Some(4)));
    let c = csv_of(&small_rows(11, None));
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = csv_of(&small_rows(12, Some(1)));
    assert_ne!(a, d);
}

#[test]
fn json_lines_match_csv_field_for_field() {
    let rows = small_rows(5, None);
    let csv = csv_of(&rows);
    let mut buf = Vec::new();
    emit(&rows, Format::JsonLines, &mut buf).unwrap();
    let json = String::from_utf8(buf).unwrap();

    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for ((csv_line, json_line), row) in lines.zip(json.lines()).zip(&rows) {
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(json_line).unwrap();
        let keys: Vec<&String> = obj.keys().collect();
        assert_eq!(keys.len(), header.len());
        let fields: Vec<&str> = csv_line.split(',').collect();
        for ((name, field), (cell_name, cell)) in header.iter().zip(&fields).zip(row.cells()) {
            assert_eq!(*name, cell_name);
            let v = &obj[*name];
            match cell {
                Cell::Float(_) | Cell::Int(_) => {
                    if field.is_empty() {
                        assert!(v.is_null(), "{name}");
                    } else {
                        let from_csv: f64 = field.parse().unwrap();
                        assert_eq!(v.as_f64().unwrap().to_bits(), from_csv.to_bits(), "{name}");
                    }
                }
                Cell::Text(s) => {
                    assert_eq!(v.as_str().unwrap(), s);
                    assert_eq!(*field, s);
                }
                Cell::Bool(b) => {
                    assert_eq!(v.as_bool().unwrap(), b);
                    assert_eq!(*field, b.to_string());
                }
            }
        }
    }
}

#[test]
fn floats_round_trip_through_csv() {
    let rows = small_rows(7, None);
    let csv = csv_of(&rows);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "detection_prob").unwrap();
    let field = csv.lines().nth(1).unwrap().split(',').nth(col).unwrap();
    let parsed: f64 = field.parse().unwrap();
    let exact = rows[0].metrics.as_ref().unwrap().detection_prob.unwrap();
    assert_eq!(parsed.to_bits(), exact.to_bits());
}

#[test]
fn config_file_round_trip_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.toml");
    std::fs::write(
        &path,
        "seed = 9\ntrials = 4\nantennas = [16, 32]\n[codes]\nn = 12\n[protocol]\np_active = 0.005\n",
    )
    .unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.codes.n, 12);
    assert_eq!(cfg.codes.q, 2);
    let pts: Vec<SweepPoint> = cfg.antennas.iter().map(|&m| SweepPoint::from_config(&cfg, m)).collect();
    let rows = run_sweep(&cfg, &pts, Some(2)).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.n_len == 12 && r.seed == 9));
    assert_ne!(rows[0].config_hash, rows[1].config_hash);

    let out = dir.path().join("out.csv");
    emit_to_path(&rows, Format::Csv, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), csv_of(&rows));
}

#[test]
fn missing_config_file_is_an_error() {
    assert!(load_config(std::path::Path::new("/nonexistent/sim.toml")).is_err());
}
