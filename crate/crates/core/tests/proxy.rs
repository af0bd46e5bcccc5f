use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rmtbvqa::error::Error;
use rmtbvqa::manifest::{self, Role};
use rmtbvqa::patch::{self, Pixels, Resolution};
use rmtbvqa::proxy::{self, MetricConfig, PairingConfig, ProxyScore, PSNR_CAP};

fn patch_of(v: Vec<u8>, n: usize) -> Pixels {
    Pixels::new(1, n, n, v).unwrap()
}

fn smooth(n: usize) -> Pixels {
    patch_of((0..3 * n * n).map(|i| 60 + ((i % n) * 2 + (i / n % n)) as u8).collect(), n)
}

#[test]
fn psnr_of_identical_patches_is_the_cap() {
    let p = smooth(16);
    assert_eq!(proxy::psnr(&p, &p).unwrap(), PSNR_CAP);
}

#[test]
fn psnr_of_uniform_offset_matches_closed_form() {
    let p = smooth(16);
    let q = patch_of(p.data.iter().map(|v| v + 16).collect(), 16);
    let expected = 10.0 * (65025.0f64 / 256.0).log10();
    assert!((proxy::psnr(&q, &p).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 24.0484).abs() < 1e-4);
}

#[test]
fn psnr_falls_as_offset_and_noise_grow() {
    let p = smooth(32);
    let mut last = PSNR_CAP;
    for d in 1..=20u8 {
        let q = patch_of(p.data.iter().map(|v| v + d).collect(), 32);
        let s = proxy::psnr(&q, &p).unwrap();
        assert!(s < last);
        last = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut last = PSNR_CAP;
    for sigma in [2.0, 8.0, 32.0] {
        let n = Normal::new(0.0, sigma).unwrap();
        let q = patch_of(
            p.data.iter().map(|&v| (f64::from(v) + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8).collect(),
            32,
        );
        let s = proxy::psnr(&q, &p).unwrap();
        assert!(s < last, "σ={sigma}: {s} ≥ {last}");
        last = s;
    }
}

#[test]
fn psnr_rejects_mismatched_shapes() {
    assert!(matches!(proxy::psnr(&smooth(8), &smooth(16)), Err(Error::Shape(_))));
}

fn score(v: f64) -> ProxyScore {
    ProxyScore { value: v, metric_name: "vmaf".into() }
}

#[test]
fn pairing_rule_examples() {
    let cfg = PairingConfig { threshold: 6.0, metric_name: "vmaf".into() };
    assert!(proxy::is_positive_pair(&score(80.0), &score(85.0), &cfg).unwrap());
    assert!(!proxy::is_positive_pair(&score(80.0), &score(90.0), &cfg).unwrap());
    assert!(proxy::is_positive_pair(&score(80.0), &score(86.0), &cfg).unwrap(), "the boundary is inclusive");
    for th in [1e-9, 0.5, 6.0, 100.0] {
        let cfg = PairingConfig { threshold: th, ..cfg.clone() };
        assert!(proxy::is_positive_pair(&score(42.0), &score(42.0), &cfg).unwrap());
    }
    let other = ProxyScore { value: 80.0, metric_name: "psnr".into() };
    assert!(matches!(proxy::is_positive_pair(&score(80.0), &other, &cfg), Err(Error::MetricMismatch(..))));
    assert!(PairingConfig { threshold: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn pairing_is_symmetric_but_not_transitive() {
    let cfg = PairingConfig { threshold: 6.0, metric_name: "vmaf".into() };
    let (a, b, c) = (score(50.0), score(54.5), score(59.0));
    let pos = |x: &ProxyScore, y: &ProxyScore| proxy::is_positive_pair(x, y, &cfg).unwrap();
    assert!(pos(&a, &b) && pos(&b, &a));
    assert!(pos(&b, &c) && pos(&c, &b));
    assert!(!pos(&a, &c));
}

#[test]
fn metric_output_parsing() {
    assert_eq!(proxy::parse_metric_output("77.3\n", None).unwrap(), 77.3);
    assert_eq!(proxy::parse_metric_output("frames: 72\nVMAF score: 91.25\n", None).unwrap(), 91.25);
    assert_eq!(proxy::parse_metric_output("{\"vmaf\": 64.5}", None).unwrap(), 64.5);
    let pat = Some(r"(?m)^VMAF score: ([0-9.]+)");
    assert_eq!(proxy::parse_metric_output("VMAF score: 80\nother 3\n", pat).unwrap(), 80.0);
    assert!(matches!(proxy::parse_metric_output("no numbers here", None), Err(Error::Tool { .. })));
    assert!(matches!(proxy::parse_metric_output("x", Some("(")), Err(Error::Config(_))));
    assert!(matches!(proxy::parse_metric_output("score nan", None), Err(Error::Tool { .. })));
}

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

fn external(cmd: String) -> MetricConfig {
    MetricConfig { name: "mock".into(), command: Some(cmd), ..Default::default() }
}

#[test]
fn mock_tool_score_is_parsed() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "mock.sh", "echo \"comparing $1 against $2\"\necho 77.3");
    let (enh, reference) = (dir.path().join("a b.rmtt"), dir.path().join("ref.rmtt"));
    let got = proxy::external_score(&enh, &reference, &external(format!("{} {{enh}} {{ref}}", s.display()))).unwrap();
    assert_eq!(got, ProxyScore { value: 77.3, metric_name: "mock".into() });
}

#[test]
fn failing_tool_reports_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let s = script(dir.path(), "fail.sh", "echo 'cannot open input' >&2\nexit 3");
    match proxy::external_score(Path::new("a"), Path::new("b"), &external(s.display().to_string())) {
        Err(Error::Tool { msg, output }) => {
            assert!(msg.contains("exit"), "{msg}");
            assert!(output.contains("cannot open input"), "{output}");
        }
        other => panic!("expected a tool error, got {other:?}"),
    }
    let s = script(dir.path(), "silent.sh", "echo done");
    assert!(matches!(
        proxy::external_score(Path::new("a"), Path::new("b"), &external(s.display().to_string())),
        Err(Error::Tool { .. })
    ));
}

#[test]
fn slow_tool_times_out() {
    let cfg = MetricConfig { timeout_secs: 1, ..external("sleep 10; echo 5".into()) };
    let start = std::time::Instant::now();
    match proxy::external_score(Path::new("a"), Path::new("b"), &cfg) {
        Err(Error::Tool { msg, .. }) => assert!(msg.contains("timed out"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(start.elapsed().as_secs() < 8);
}

/// One source, two enhanced patches (offsets 4 and 20) with down rows and a
/// shared reference, written to `dir`.
fn labelled_fixture(dir: &Path) -> manifest::Manifest {
    let reference = smooth(8);
    let write = |name: &str, p: &Pixels| {
        patch::write_pixels(&dir.join(format!("patches/{name}.rmtt")), p).unwrap();
    };
    write("r", &reference);
    let mut text = String::from("#seed=1\npatch_id,source_id,enhancement_tag,resolution_tag,role,reference_link,proxy_score,path\nr,s,reference,full,reference,,,patches/r.rmtt\n");
    for (id, d) in [("a", 4u8), ("b", 20)] {
        let p = patch_of(reference.data.iter().map(|v| v + d).collect(), 8);
        write(id, &p);
        write(&format!("{id}_down"), &patch::downsample_pixels(&p).unwrap());
        text.push_str(&format!("{id},s,off{d},full,enhanced,r,,patches/{id}.rmtt\n"));
        text.push_str(&format!("{id}_down,s,off{d},down,enhanced,{id},,patches/{id}_down.rmtt\n"));
    }
    manifest::parse(&text, &dir.join("m.csv")).unwrap()
}

#[test]
fn labelling_scores_full_rows_and_down_rows_inherit() {
    let dir = tempfile::tempdir().unwrap();
    let m = labelled_fixture(dir.path());
    let out = proxy::label_manifest(&m, dir.path(), &MetricConfig::default(), 3).unwrap();
    let get = |id: &str| out.get(id).unwrap().proxy_score.unwrap();
    assert!((get("a") - 10.0 * (65025.0f64 / 16.0).log10()).abs() < 1e-12);
    assert!((get("b") - 10.0 * (65025.0f64 / 400.0).log10()).abs() < 1e-12);
    assert_eq!(get("a_down"), get("a"));
    assert_eq!(get("b_down"), get("b"));
    assert_eq!(get("r"), PSNR_CAP);
    assert!(out.rows.iter().filter(|r| r.resolution == Resolution::Full).all(|r| r.proxy_score.is_some()));

    let again = proxy::label_manifest(&out, dir.path(), &MetricConfig::default(), 1).unwrap();
    assert_eq!(manifest::to_string(&again).unwrap(), manifest::to_string(&out).unwrap());
}

#[test]
fn labelling_through_an_external_tool() {
    let dir = tempfile::tempdir().unwrap();
    let m = labelled_fixture(dir.path());
    let s = script(dir.path(), "len.sh", "case \"$1\" in *a.rmtt) echo 'score 70';; *) echo 'score 90';; esac");
    let cfg = MetricConfig { repeat_check: true, ..external(format!("{} {{enh}} {{ref}}", s.display())) };
    let out = proxy::label_manifest(&m, dir.path(), &cfg, 2).unwrap();
    assert_eq!(out.get("a").unwrap().proxy_score, Some(70.0));
    assert_eq!(out.get("a_down").unwrap().proxy_score, Some(70.0));
    assert_eq!(out.get("b").unwrap().proxy_score, Some(90.0));
    assert_eq!(out.rows.iter().filter(|r| r.role == Role::Enhanced).count(), 4);
}

#[test]
fn labelling_needs_references() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = labelled_fixture(dir.path());
    m.rows.iter_mut().find(|r| r.patch_id == "a").unwrap().reference_link = None;
    // An enhanced full row without a reference cannot be scored.
    assert!(matches!(
        proxy::label_manifest(&m, dir.path(), &MetricConfig::default(), 1),
        Err(Error::MissingReference(_))
    ));
}
