use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &[&str] = &["--latent", "16x16", "--steps", "4", "--seed-count", "2"];

fn bench(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tomesd-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    bench(&args)
}

/// `(width, height, rgb)` of a binary PPM.
fn read_ppm(path: &Path) -> (usize, usize, Vec<[u8; 3]>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(4, |&b| b == b'\n').collect();
    assert_eq!(header[0], b"P6");
    let dims = std::str::from_utf8(header[1]).unwrap();
    let (w, h) = dims.split_once(' ').unwrap();
    let pixels = header[3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    (w.parse().unwrap(), h.parse().unwrap(), pixels)
}

#[test]
fn identical_runs_write_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in(&a, &[]).status.success());
    assert!(run_in(&b, &[]).status.success());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert!(a.join("timing.json").exists());
}

#[test]
fn config_file_and_flags_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    fs::write(
        &conf,
        "# same settings as the flags below\nlatent = 16x16\nsteps = 4\nseed_count = 2\nratio = 0.4\npartition = strided:2x2\napply = self,mlp\n",
    )
    .unwrap();
    let from_file = tmp.path().join("file");
    let out = bench(&["run", "--config", conf.to_str().unwrap(), "--out", from_file.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_flags = tmp.path().join("flags");
    assert!(run_in(&from_flags, &["--ratio", "0.4", "--partition", "strided:2x2", "--apply", "self,mlp"]).status.success());
    assert_eq!(
        fs::read(from_file.join("report.json")).unwrap(),
        fs::read(from_flags.join("report.json")).unwrap()
    );

    // The resolved config reproduces the run.
    let again = tmp.path().join("again");
    let resolved = from_file.join("resolved.conf");
    let out = bench(&["run", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read(again.join("report.json")).unwrap(), fs::read(from_file.join("report.json")).unwrap());
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "ratio = 0.5\nmerge_everything = yes\n").unwrap();
    let out = bench(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("merge_everything"));

    let out = bench(&["run", "--ratio", "0.9", "--partition", "rand2x2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.75"));

    let file = tmp.path().join("not_a_dir");
    fs::write(&file, "").unwrap();
    let unwritable = file.join("sub");
    let out = bench(&["run", "--latent", "8x8", "--steps", "1", "--out", unwritable.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = bench(&[
        "sweep", "--ratio", "0.1:0.6:0.1", "--latent", "16x16", "--steps", "4", "--format", "csv", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ratio, err, speed) = (col("ratio"), col("relative_l2"), col("speedup_estimate"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let f = |r: &csv::StringRecord, i: usize| r[i].parse::<f64>().unwrap();
    assert_eq!(f(&rows[0], ratio), 0.1);
    assert_eq!(f(&rows[5], ratio), 0.6);
    assert!(f(&rows[5], err) > f(&rows[0], err));
    assert!(rows.windows(2).all(|w| f(&w[1], speed) >= f(&w[0], speed)));
}

#[test]
fn viz_renders_partition_patterns() {
    let tmp = tempfile::tempdir().unwrap();
    let render = |partition: &str| {
        let dir = tmp.path().join(partition.replace(':', "_"));
        let out = bench(&["viz", "--partition", partition, "--latent", "8x8", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read_ppm(&dir.join("mask.ppm"))
    };
    let white = |p: [u8; 3]| p == [255, 255, 255];

    let (w, h, px) = render("strided:2x2");
    assert_eq!((w, h), (8, 8));
    for (i, &p) in px.iter().enumerate() {
        assert_eq!(white(p), (i / w) % 2 == 0 && (i % w) % 2 == 0);
    }

    let (w, _, px) = render("alt");
    for (i, &p) in px.iter().enumerate() {
        assert_eq!(white(p), (i % w) % 2 == 1);
    }

    let (w, _, px) = render("rand2x2");
    for ty in 0..4 {
        for tx in 0..4 {
            let whites = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (2 * ty + dy) * w + 2 * tx + dx))
                .filter(|&i| white(px[i]))
                .count();
            assert_eq!(whites, 1);
        }
    }

    let dir = tmp.path().join("rand2x2");
    let out = bench(&["viz", "--plan", dir.join("edges.txt").to_str().unwrap(), "--latent", "8x8", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_ppm(&dir.join("plan_merge.ppm")).2.len(), 64);
}

#[test]
fn viz_partition_flag_writes_views() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("v");
    let out = run_in(&dir, &["--viz-partition", "--no-compare-baseline"]);
    assert!(out.status.success());
    assert!(dir.join("viz/step000_layer00_mask.ppm").exists());
    assert!(dir.join("viz/step003_layer05_edges.txt").exists());
}
