use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qrf_cli::{parse_config_str, plan, CliError, RunConfig, Suite, EXIT_CONFIG, EXIT_PASS, EXIT_TOLERANCE};
use qrf_core::models::ModelKind;

fn qrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrf")).args(args).output().expect("spawn qrf")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn empty_config_takes_defaults() {
    let c = parse_config_str("{}").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!((c.model, c.suites.clone(), c.seed), (None, None, 0));
    assert_eq!((c.tolerance, c.slope_tolerance, c.flow_tolerance), (1e-10, 0.2, 1e-6));
    assert_eq!((c.observables, c.states), (20, 5));
    assert!(c.hbar_ladder.len() >= 2);
}

#[test]
fn rational_strings_are_exact_and_floats_are_refused() {
    let c = parse_config_str(r#"{"parameters":{"spin":"3/2","beta":2,"energies":[1,"4"]}}"#).unwrap();
    let spec = c.spec_for(ModelKind::Su2, Suite::Spin);
    assert_eq!(spec.two_j, 3);
    assert_eq!(spec.beta, num::rational::Rational64::from_integer(2));
    assert_eq!(c.spec_for(ModelKind::Degenerate, Suite::Degenerate).energies, vec![1, 4]);

    match parse_config_str(r#"{"parameters":{"beta":0.5}}"#) {
        Err(CliError::Schema { field, message, .. }) => {
            assert_eq!(field, "parameters.beta");
            assert!(message.contains("floating-point"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_fields_are_reported_with_their_path() {
    match parse_config_str(r#"{"parameters":{"bta":1}}"#) {
        Err(e @ CliError::Schema { .. }) => {
            let CliError::Schema { ref field, ref message, .. } = e else { unreachable!() };
            assert_eq!(field, "parameters.bta");
            assert!(message.contains("unknown field `bta`"));
            assert_eq!(e.exit_code(), EXIT_CONFIG);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config_str(r#"{"colour":"red"}"#), Err(CliError::Schema { field, .. }) if field == "colour"));
    assert!(matches!(parse_config_str(r#"{"model":"harmonic"}"#), Err(CliError::Schema { field, .. }) if field == "model"));
}

#[test]
fn out_of_range_values_are_invalid() {
    for (text, field) in [
        (r#"{"tolerance":0}"#, "tolerance"),
        (r#"{"hbar_ladder":[0.5]}"#, "hbar_ladder"),
        (r#"{"hbar_ladder":[0.5,-1]}"#, "hbar_ladder[1]"),
        (r#"{"states":0}"#, "states"),
        (r#"{"parameters":{"spin":"1/3"}}"#, "parameters.spin"),
        (r#"{"parameters":{"energies":[1,"1/2"]}}"#, "parameters.energies[1]"),
        (r#"{"parameters":{"mass":"-1"}}"#, "parameters.mass"),
        (r#"{"state":{"width":-2.0}}"#, "state.width"),
    ] {
        match parse_config_str(text) {
            Err(CliError::Invalid { field: f, .. }) => assert_eq!(f, field, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn planning_keeps_applicable_pairs() {
    let all = plan(&RunConfig::default()).unwrap();
    assert_eq!(all.iter().filter(|(_, s)| *s == Suite::Scaling).count(), 1);
    assert!(all.iter().all(|(m, s)| s.applies_to(*m)));
    assert_eq!(all.len(), 3 + 1 + 1 + 1 + 1 + 4);

    let c = parse_config_str(r#"{"suites":["variance","spin"]}"#).unwrap();
    assert_eq!(plan(&c).unwrap(), vec![(ModelKind::NParticle, Suite::Variance), (ModelKind::Su2, Suite::Spin)]);

    let c = parse_config_str(r#"{"model":"newtonian","suites":["scaling"]}"#).unwrap();
    assert!(matches!(plan(&c), Err(CliError::Unsupported { suite: Suite::Scaling, model: ModelKind::Newtonian })));

    let c = parse_config_str(r#"{"suites":[]}"#).unwrap();
    assert!(plan(&c).unwrap().is_empty());
}

#[test]
fn incommensurable_beta_exits_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model":"su2","suites":["spin"],"parameters":{"lattice":8,"spin":"1/2","beta":"1/3"}}"#,
    );
    let o = qrf(&["check", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let err = stderr(&o);
    assert!(err.contains("hint:") && err.contains("beta"), "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn check_on_a_single_model_passes() {
    let o = qrf(&["check", "--model", "degenerate", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(EXIT_PASS), "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("| degenerate | degenerate | 16 |"), "{md}");
    assert!(md.contains("| degenerate | projector | 16 |"), "{md}");
    assert!(!md.contains("FAIL"));
}

#[test]
fn unsupported_pairs_and_bad_flags_exit_with_config_status() {
    let o = qrf(&["model", "newtonian", "--suite", "scaling"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("does not apply"));

    let o = qrf(&["check", "--model", "harmonic"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));

    let o = qrf(&["check", "--suite", "degenerate", "--tol=0"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("tolerance"));
}

#[test]
fn report_writes_fixed_columns_and_flags_tolerance_failures() {
    // The variance experiment needs a wide lattice; at 16 sites wraparound
    // pushes residuals past the default tolerance.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"parameters":{"lattice":16},"states":1}"#);
    let out = dir.path().join("reports");
    let o = qrf(&["report", "--config", &cfg, "--suite", "variance", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_TOLERANCE), "{}", stderr(&o));

    let mut rd = csv::Reader::from_path(out.join("nparticle-variance.csv")).unwrap();
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ["quantity", "formalism", "value_re", "value_im", "residual"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        for col in 2..5 {
            r[col].parse::<f64>().unwrap();
        }
    }
    let summary = fs::read_to_string(out.join("summary.md")).unwrap();
    assert!(summary.contains("| nparticle | variance | 16 |") && summary.contains("FAIL"));
    let names: BTreeSet<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, BTreeSet::from(["nparticle-variance.csv".to_string(), "summary.md".to_string()]));
}

#[test]
fn empty_suite_list_produces_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"suites":[]}"#);
    let out = dir.path().join("reports");
    let o = qrf(&["report", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_PASS));
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("No suites selected."));
    assert_eq!(fs::read_to_string(out.join("summary.md")).unwrap(), md);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
}

#[test]
fn same_seed_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"model":"newtonian","parameters":{"lattice":8},"suites":["equivalence"],"observables":4,"states":2}"#);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = qrf(&["report", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(EXIT_PASS), "{}", stderr(&o));
        (fs::read(out.join("newtonian-equivalence.csv")).unwrap(), fs::read(out.join("summary.md")).unwrap())
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a.0, run("c", "12").0);
}

#[test]
fn selftest_passes() {
    let o = qrf(&["selftest"]);
    assert_eq!(o.status.code(), Some(EXIT_PASS), "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    for kind in ModelKind::ALL {
        assert!(md.contains(&format!("| {kind} | projector |")), "{md}");
    }
}

#[test]
fn sample_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples-config");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let c = qrf_cli::parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        plan(&c).unwrap();
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn schema_matches_the_config_fields() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("config.schema.json")).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys = |v: &serde_json::Value| -> BTreeSet<String> { v["properties"].as_object().unwrap().keys().cloned().collect() };
    let set = |xs: &[&str]| -> BTreeSet<String> { xs.iter().map(|s| s.to_string()).collect() };

    let top = [
        "model",
        "parameters",
        "state",
        "suites",
        "tolerance",
        "slope_tolerance",
        "flow_tolerance",
        "hbar_ladder",
        "observables",
        "states",
        "seed",
        "out",
    ];
    assert_eq!(keys(&schema), set(&top));
    assert_eq!(keys(&schema["properties"]["parameters"]), set(&["lattice", "dp", "hbar", "particles", "spin", "beta", "mass", "energies"]));
    assert_eq!(keys(&schema["properties"]["state"]), set(&["width", "centers", "momenta", "shear"]));

    // Each listed property is accepted by the parser, and nothing else is.
    for key in top {
        let probe = format!("{{\"{key}\": null}}");
        if let Err(CliError::Schema { message, .. }) = parse_config_str(&probe) {
            assert!(!message.contains("unknown field"), "{key}: {message}");
        }
    }
    let suites: BTreeSet<String> = schema["$defs"]["suite"]["enum"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().into()).collect();
    assert_eq!(suites, Suite::ALL.iter().map(|s| s.to_string()).collect());
    let models: BTreeSet<String> = schema["properties"]["model"]["enum"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().into()).collect();
    assert_eq!(models, ModelKind::ALL.iter().map(|m| m.to_string()).collect());
}
