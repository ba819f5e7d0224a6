use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use flda_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(flda_last_error()) }.to_string_lossy().into_owned()
}

fn table_query(lambda: f64, d: u64) -> FldaThroughputQuery {
    FldaThroughputQuery {
        access_prob: 0.2,
        channels: 4,
        active_users: 20.0,
        lambda,
        info_subpackets: d,
        code_rate: 0.5,
    }
}

#[test]
fn analytic_values_match_the_library() {
    let mut v = 0.0;
    let q = table_query(0.0, 2);
    assert_eq!(unsafe { flda_p_a(&q, &mut v) }, FldaStatus::Ok);
    assert!((v - 0.075_470_720_507_061_44).abs() < 1e-15);
    assert_eq!(unsafe { flda_p_ma(&q, &mut v) }, FldaStatus::Ok);
    assert!((v - 0.075_470_720_507_061_44).abs() < 1e-15);
    assert_eq!(unsafe { flda_p_s(3.0, 4, &mut v) }, FldaStatus::Ok);
    assert_eq!(v, (-0.75f64).exp());
    let mut rho = 0.0;
    assert_eq!(unsafe { flda_rho(&q, &mut rho) }, FldaStatus::Ok);
    assert!((rho - 20.0 * 0.075_470_720_507_061_44).abs() < 1e-13);
    assert_eq!(flda_rho_flda(0.0, 1.0, 2.0), 2.0);
    assert_eq!(flda_rho_flda(1.0, 1.0, 2.0), 1.0);
    assert_eq!(flda_k_hat(20, 0.5), 10.0);
}

#[test]
fn subpacket_plans() {
    let mut p = FldaSubpacketPlan::default();
    assert_eq!(unsafe { flda_subpacket_plan(3200, 2008, 0.5, &mut p) }, FldaStatus::Ok);
    assert_eq!((p.bits, p.info, p.total), (3200, 2, 4));
    assert_eq!(unsafe { flda_subpacket_plan(223_488, 2008, 0.5, &mut p) }, FldaStatus::Ok);
    assert_eq!((p.info, p.total), (112, 224));
    assert_eq!(unsafe { flda_subpacket_plan(0, 2008, 0.5, &mut p) }, FldaStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let mut v = 0.0;
    let mut q = table_query(0.0, 2);
    q.access_prob = 1.5;
    assert_eq!(unsafe { flda_p_a(&q, &mut v) }, FldaStatus::InvalidArgument);
    assert!(last_error().contains("p must be"), "{}", last_error());
    assert_eq!(unsafe { flda_p_a(ptr::null(), &mut v) }, FldaStatus::NullPointer);
    assert_eq!(unsafe { flda_p_a(&table_query(0.0, 2), ptr::null_mut()) }, FldaStatus::NullPointer);
    // success clears the message
    assert_eq!(unsafe { flda_p_a(&table_query(0.0, 2), &mut v) }, FldaStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn config_round_trip_and_overrides() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(flda_config_default(&mut cfg), FldaStatus::Ok);
        let key = CString::new("lambda").unwrap();
        let ok = CString::new("2.5").unwrap();
        let bad = CString::new("\"loud\"").unwrap();
        assert_eq!(flda_config_set(cfg, key.as_ptr(), ok.as_ptr()), FldaStatus::Ok);
        assert_eq!(flda_config_set(cfg, key.as_ptr(), bad.as_ptr()), FldaStatus::Config);
        let unknown = CString::new("network.nope").unwrap();
        assert_eq!(flda_config_set(cfg, unknown.as_ptr(), ok.as_ptr()), FldaStatus::Config);

        let mut len = 0;
        assert_eq!(flda_config_to_toml(cfg, ptr::null_mut(), 0, &mut len), FldaStatus::Ok);
        let mut small = vec![0 as std::ffi::c_char; len];
        assert_eq!(flda_config_to_toml(cfg, small.as_mut_ptr(), len, &mut len), FldaStatus::OutOfRange);
        let mut buf = vec![0 as std::ffi::c_char; len + 1];
        assert_eq!(flda_config_to_toml(cfg, buf.as_mut_ptr(), buf.len(), &mut len), FldaStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_owned();
        assert!(text.to_str().unwrap().contains("lambda = 2.5"));

        let mut again = ptr::null_mut();
        assert_eq!(flda_config_from_toml(text.as_ptr(), &mut again), FldaStatus::Ok);
        let mut len2 = 0;
        flda_config_to_toml(again, ptr::null_mut(), 0, &mut len2);
        assert_eq!(len, len2);

        let junk = CString::new("[run\nseed = ").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(flda_config_from_toml(junk.as_ptr(), &mut none), FldaStatus::Config);
        assert!(none.is_null());
        flda_config_free(cfg);
        flda_config_free(again);
        flda_config_free(ptr::null_mut());
    }
}

fn small_config() -> *mut FldaConfig {
    let toml = CString::new(
        "[run]\nmode = \"flda\"\nmax_iterations = 12\neval_period_s = 0.2\n\
         [network]\nK = 4\n\
         [learning]\nhidden = [8]\ngamma = 4\n\
         [data]\nclasses = 4\ndim = 6\nper_class = 40\ntest_per_class = 10\nminority_labels = 1\nminority_count = 1\nmajority_count = 5\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { flda_config_from_toml(toml.as_ptr(), &mut cfg) }, FldaStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn simulation_steps_and_runs() {
    unsafe {
        let cfg = small_config();
        let mut sim = ptr::null_mut();
        assert_eq!(flda_sim_new(cfg, &mut sim), FldaStatus::Ok, "{}", last_error());
        assert_eq!(flda_sim_time(sim), 0.0);
        let mut rep = FldaIteration::default();
        assert_eq!(flda_sim_step(sim, &mut rep), FldaStatus::Ok);
        assert_eq!(rep.iteration, 0);
        assert_eq!(rep.phase, 0);
        assert!(flda_sim_time(sim) > 0.0);
        assert!(flda_sim_energy_conserved(sim));
        let mut point = FldaMetricsPoint::default();
        assert_eq!(flda_sim_metrics(sim, &mut point), FldaStatus::Ok);
        assert!((0.0..=1.0).contains(&point.mean_accuracy));
        flda_sim_free(sim);

        let mut sim = ptr::null_mut();
        flda_sim_new(cfg, &mut sim);
        let mut trace = ptr::null_mut();
        assert_eq!(flda_sim_run(sim, &mut trace), FldaStatus::Ok, "{}", last_error());
        let n = flda_trace_len(trace);
        assert!(n >= 2);
        assert_eq!(flda_trace_get(trace, 0, &mut point), FldaStatus::Ok);
        assert_eq!((point.time_s, point.phase), (0.0, -1));
        assert_eq!(flda_trace_get(trace, n - 1, &mut point), FldaStatus::Ok);
        assert_eq!(point.iteration, 12);
        assert_eq!(flda_trace_get(trace, n, &mut point), FldaStatus::OutOfRange);
        flda_trace_free(trace);
        flda_sim_free(sim);
        flda_config_free(cfg);

        assert_eq!(flda_sim_step(ptr::null_mut(), ptr::null_mut()), FldaStatus::NullPointer);
        assert_eq!(flda_trace_len(ptr::null()), 0);
        assert!(flda_sim_time(ptr::null()) < 0.0);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(flda_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/flda.h")).unwrap();
    let source = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let mut count = 0;
    for line in source.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            count += 1;
        }
    }
    assert!(count >= 20);
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(dir.join("include/flda.h"))
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{cc} rejected the header"),
            Err(_) => eprintln!("{cc} not available; skipping"),
        }
    }
}
