use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dualteach_ffi::*;

fn last_error() -> String {
    let p = dt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const TINY: &str = r#"
synthetic_labeled = 40
synthetic_unlabeled = 20
synthetic_dev = 20
synthetic_test = 20
k = 1
teacher_epochs = 1
masked_epochs = 1
student_epochs = 1
iterations = 2
hidden = 8
layers = 1
heads = 2
ffn = 16
"#;

#[test]
fn joint_score_and_refinement() {
    let gold = [0.6, 0.3, 0.1];
    let masked = [0.2, 0.5, 0.3];
    let mut out = [0.0; 3];
    let status = unsafe { dt_joint_score(gold.as_ptr(), masked.as_ptr(), 3, 0.5, out.as_mut_ptr()) };
    assert_eq!(status, DtStatus::Ok);
    for (got, want) in out.iter().zip([0.4, 0.4, 0.2]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(dt_last_error().is_null());

    let status = unsafe { dt_joint_score(gold.as_ptr(), masked.as_ptr(), 3, 1.5, out.as_mut_ptr()) };
    assert_eq!(status, DtStatus::Config);
    assert!(last_error().contains("gamma must lie in [0,1]"));

    let student = [0.7, 0.2, 0.1];
    let reference = [0.5, 0.3, 0.2];
    let status = unsafe { dt_refine_scores(student.as_ptr(), reference.as_ptr(), 3, 1, 5, 0.5, out.as_mut_ptr()) };
    assert_eq!(status, DtStatus::Ok);
    // lambda = 0.2: 0.5 * (1.2 * s + 0.8 * r)
    for ((got, s), r) in out.iter().zip(student).zip(reference) {
        assert!((got - 0.5 * (1.2 * s + 0.8 * r)).abs() < 1e-12);
    }
}

#[test]
fn null_pointers_and_small_buffers() {
    let gold = [0.5, 0.5];
    let mut out = [0.0; 2];
    let status = unsafe { dt_joint_score(ptr::null(), gold.as_ptr(), 2, 0.5, out.as_mut_ptr()) };
    assert_eq!(status, DtStatus::NullPointer);
    assert!(last_error().contains("gold is null"));
    let status = unsafe { dt_joint_score(gold.as_ptr(), gold.as_ptr(), 2, 0.5, ptr::null_mut()) };
    assert_eq!(status, DtStatus::NullPointer);
    let status = unsafe {
        dt_evaluate(
            gold.as_ptr(),
            gold.as_ptr(),
            1,
            2,
            DtMseDivisor::Classes,
            ptr::null_mut(),
        )
    };
    assert_eq!(status, DtStatus::NullPointer);
    unsafe {
        dt_model_free(ptr::null_mut());
        dt_config_free(ptr::null_mut());
        assert_eq!(dt_model_num_classes(ptr::null()), 0);
    }
}

#[test]
fn evaluate_perfect_and_divisor() {
    let preds = [0.8, 0.2, 0.1, 0.9];
    let golds = [0.6, 0.4, 0.3, 0.7];
    let mut metrics = DtMetrics::default();
    let status = unsafe {
        dt_evaluate(
            preds.as_ptr(),
            golds.as_ptr(),
            2,
            2,
            DtMseDivisor::Classes,
            &mut metrics,
        )
    };
    assert_eq!(status, DtStatus::Ok);
    assert_eq!(metrics.accuracy, 1.0);
    assert_eq!(metrics.macro_f1, 1.0);
    // Per instance squared error is 2 * 0.2^2 = 0.08, halved by |C|.
    assert!((metrics.mse - 0.04).abs() < 1e-12);
    let mut one = DtMetrics::default();
    let status = unsafe { dt_evaluate(preds.as_ptr(), golds.as_ptr(), 2, 2, DtMseDivisor::One, &mut one) };
    assert_eq!(status, DtStatus::Ok);
    assert!((one.mse - 0.08).abs() < 1e-12);
    assert_eq!(one.jsd, metrics.jsd);
}

#[test]
fn config_errors_are_reported() {
    let mut config = ptr::null_mut();
    let text = CString::new("gamma = 1.5").unwrap();
    let status = unsafe { dt_config_parse(text.as_ptr(), &mut config) };
    assert_eq!(status, DtStatus::Config);
    assert!(config.is_null());
    assert!(last_error().contains("gamma"));

    let text = CString::new("rho_l_typo = 0.3").unwrap();
    assert_eq!(unsafe { dt_config_parse(text.as_ptr(), &mut config) }, DtStatus::Config);
    assert!(last_error().contains("rho_l_typo"));

    assert_eq!(unsafe { dt_config_parse(ptr::null(), &mut config) }, DtStatus::Ok);
    let bogus = CString::new("bogus").unwrap();
    assert_eq!(
        unsafe { dt_config_set_strategy(config, bogus.as_ptr()) },
        DtStatus::Config
    );
    unsafe { dt_config_free(config) };
}

#[test]
fn pipeline_then_classify() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let text = CString::new(TINY).unwrap();
    let mut config = ptr::null_mut();
    unsafe {
        assert_eq!(dt_config_parse(text.as_ptr(), &mut config), DtStatus::Ok);
        assert_eq!(dt_config_set_seed(config, 3), DtStatus::Ok);
        let mut metrics = DtMetrics::default();
        assert_eq!(dt_run_pipeline(config, out_dir.as_ptr(), &mut metrics), DtStatus::Ok);
        assert!((0.0..=1.0).contains(&metrics.accuracy));
        assert!((0.0..=1.0).contains(&metrics.jsd));
        dt_config_free(config);
    }
    assert!(dir.path().join("report.json").exists());

    let name = CString::new("student-ours").unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(dt_model_open(out_dir.as_ptr(), name.as_ptr(), &mut model), DtStatus::Ok);
        assert_eq!(dt_model_num_classes(model), 3);
        let mut buf = [0 as std::ffi::c_char; 8];
        assert_eq!(dt_model_class_name(model, 1, buf.as_mut_ptr(), buf.len()), DtStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "PB");
        assert_eq!(
            dt_model_class_name(model, 1, buf.as_mut_ptr(), 2),
            DtStatus::BufferTooSmall
        );

        let turns = [
            CString::new("w50 w60 w70 .").unwrap(),
            CString::new("w80 w90 .").unwrap(),
        ];
        let history: Vec<_> = turns.iter().map(|t| t.as_ptr()).collect();
        let target = CString::new("w1 w2 w3 ?").unwrap();
        let mut probs = [0.0; 3];
        let status = dt_model_classify(
            model,
            ptr::null(),
            history.as_ptr(),
            history.len(),
            target.as_ptr(),
            probs.as_mut_ptr(),
            probs.len(),
        );
        assert_eq!(status, DtStatus::Ok, "{}", last_error());
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let status = dt_model_classify(
            model,
            ptr::null(),
            history.as_ptr(),
            2,
            target.as_ptr(),
            probs.as_mut_ptr(),
            2,
        );
        assert_eq!(status, DtStatus::BufferTooSmall);
        let empty = CString::new("").unwrap();
        let status = dt_model_classify(
            model,
            ptr::null(),
            history.as_ptr(),
            2,
            empty.as_ptr(),
            probs.as_mut_ptr(),
            3,
        );
        assert_eq!(status, DtStatus::InvalidArgument);
        dt_model_free(model);

        let missing = CString::new("no-such-model").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(
            dt_model_open(out_dir.as_ptr(), missing.as_ptr(), &mut none),
            DtStatus::Io
        );
        assert!(none.is_null());
    }
}

#[test]
fn header_compiles_as_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("dualteach.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for symbol in [
        "dt_last_error",
        "dt_model_classify",
        "dt_joint_score",
        "dt_refine_scores",
        "dt_evaluate",
        "dt_run_pipeline",
    ] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("main.c");
    std::fs::write(
        &source,
        "#include \"dualteach.h\"\nint main(void) { DtMetrics m; (void)m; return dt_last_error() == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let output = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&source)
        .output()
        .expect("C compiler available");
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}
