use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use choicectl::cli::{ControllerKind, ScenarioDocument};
use choicectl::scenarios;
use choicectl_ffi::*;

fn last_error() -> String {
    let p = choicectl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scenario_from_json(json: &str) -> (ChoicectlStatus, *mut ChoicectlScenario) {
    let c = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { choicectl_scenario_from_json(c.as_ptr(), &mut out) };
    (status, out)
}

fn rendezvous_json(h: [[f64; 2]; 2]) -> String {
    let s = scenarios::rendezvous(5.0, h, 1.0).unwrap();
    ScenarioDocument::from_scenario(&s, ControllerKind::OpenLoop, None).to_json()
}

#[test]
fn rendezvous_round_trip_through_handles() {
    let (status, s) = scenario_from_json(&rendezvous_json([[10.0, 0.0], [0.0, -10.0]]));
    assert_eq!(status, ChoicectlStatus::Ok);

    let mut residual = f64::NAN;
    let mut compatible = false;
    assert_eq!(
        unsafe { choicectl_check(s, &mut residual, &mut compatible) },
        ChoicectlStatus::Ok
    );
    assert_eq!(residual, 0.0);
    assert!(compatible);

    let mut law = ptr::null_mut();
    assert_eq!(
        unsafe { choicectl_synthesize(s, &mut law) },
        ChoicectlStatus::Ok
    );

    let mut u = [0.0];
    for t in [0.0, 0.25, 0.5, 1.0] {
        assert_eq!(
            unsafe { choicectl_law_control_value(law, 0, 0, t, u.as_mut_ptr(), 1) },
            ChoicectlStatus::Ok
        );
        assert!((u[0] - (15.0 - 30.0 * t)).abs() < 1e-9, "t = {t}: {}", u[0]);
    }

    let mut x = [0.0; 2];
    let choices = [1usize, 1];
    assert_eq!(
        unsafe { choicectl_law_terminal_state(law, choices.as_ptr(), 2, x.as_mut_ptr(), 2) },
        ChoicectlStatus::Ok
    );
    assert!((x[0] + 10.0).abs() < 1e-9 && x[1].abs() < 1e-9, "{x:?}");

    let mut cost = 0.0;
    assert_eq!(
        unsafe { choicectl_law_average_cost(law, &mut cost) },
        ChoicectlStatus::Ok
    );
    assert!(cost > 0.0);

    let mut agents = 0;
    assert_eq!(
        unsafe { choicectl_law_agents(law, &mut agents) },
        ChoicectlStatus::Ok
    );
    assert_eq!(agents, 2);

    unsafe {
        choicectl_law_free(law);
        choicectl_scenario_free(s);
    }
}

#[test]
fn flat_array_constructor_matches_scalar_integrator_pair() {
    let a = [0.0];
    let input_dims = [1usize, 1];
    let inputs = [1.0, 1.0];
    let x0 = [0.0];
    let dims = [2usize, 2];
    let targets = [1.0, 0.0, 0.0, -1.0];
    let mut s = ptr::null_mut();
    let status = unsafe {
        choicectl_scenario_new(
            1,
            a.as_ptr(),
            2,
            input_dims.as_ptr(),
            inputs.as_ptr(),
            0.0,
            1.0,
            x0.as_ptr(),
            dims.as_ptr(),
            targets.as_ptr(),
            &mut s,
        )
    };
    assert_eq!(status, ChoicectlStatus::Ok);
    let mut law = ptr::null_mut();
    assert_eq!(
        unsafe { choicectl_synthesize(s, &mut law) },
        ChoicectlStatus::Ok
    );
    let mut cost = 0.0;
    assert_eq!(
        unsafe { choicectl_law_average_cost(law, &mut cost) },
        ChoicectlStatus::Ok
    );
    assert!((cost - 0.5).abs() < 1e-10);
    let want = [[0.5, -0.5], [0.5, -0.5]];
    for (agent, row) in want.iter().enumerate() {
        for (choice, w) in row.iter().enumerate() {
            let mut u = [0.0];
            let st =
                unsafe { choicectl_law_control_value(law, agent, choice, 0.3, u.as_mut_ptr(), 1) };
            assert_eq!(st, ChoicectlStatus::Ok);
            assert!((u[0] - w).abs() < 1e-10);
        }
    }
    unsafe {
        choicectl_law_free(law);
        choicectl_scenario_free(s);
    }
}

#[test]
fn incompatible_targets_report_status_and_message() {
    let (status, s) = scenario_from_json(&rendezvous_json([[5.0, 0.0], [0.0, 0.0]]));
    assert_eq!(status, ChoicectlStatus::Ok);
    let mut law = ptr::null_mut();
    assert_eq!(
        unsafe { choicectl_synthesize(s, &mut law) },
        ChoicectlStatus::Incompatible
    );
    assert!(law.is_null());
    assert!(last_error().contains("incompatible"));
    unsafe { choicectl_scenario_free(s) };
}

#[test]
fn malformed_inputs_are_rejected() {
    let (status, s) = scenario_from_json("{\"version\": 1");
    assert_eq!(status, ChoicectlStatus::InvalidArgument);
    assert!(s.is_null());
    assert!(last_error().contains("line"));

    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { choicectl_scenario_from_json(ptr::null(), &mut out) },
        ChoicectlStatus::NullPointer
    );
    let mut r = 0.0;
    let mut c = false;
    assert_eq!(
        unsafe { choicectl_check(ptr::null(), &mut r, &mut c) },
        ChoicectlStatus::NullPointer
    );
}

#[test]
fn short_buffers_and_bad_indices_are_reported() {
    let (_, s) = scenario_from_json(&rendezvous_json([[10.0, 0.0], [0.0, -10.0]]));
    let mut law = ptr::null_mut();
    assert_eq!(
        unsafe { choicectl_synthesize(s, &mut law) },
        ChoicectlStatus::Ok
    );
    let mut x = [0.0; 1];
    let choices = [0usize, 0];
    assert_eq!(
        unsafe { choicectl_law_terminal_state(law, choices.as_ptr(), 2, x.as_mut_ptr(), 1) },
        ChoicectlStatus::BufferTooSmall
    );
    let mut u = [0.0];
    assert_eq!(
        unsafe { choicectl_law_control_value(law, 0, 5, 0.0, u.as_mut_ptr(), 1) },
        ChoicectlStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { choicectl_law_control_value(law, 0, 0, 2.0, u.as_mut_ptr(), 1) },
        ChoicectlStatus::InvalidArgument
    );
    unsafe {
        choicectl_law_free(law);
        choicectl_scenario_free(s);
        choicectl_law_free(ptr::null_mut());
        choicectl_scenario_free(ptr::null_mut());
    }
}

#[test]
fn status_strings_are_static() {
    let s = unsafe { CStr::from_ptr(choicectl_status_string(ChoicectlStatus::Incompatible)) };
    assert_eq!(s.to_str().unwrap(), "incompatible targets");
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("choicectl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "choicectl_scenario_from_json",
        "choicectl_scenario_new",
        "choicectl_synthesize",
        "choicectl_law_control_value",
        "choicectl_law_terminal_state",
        "choicectl_last_error",
        "CHOICECTL_STATUS_INCOMPATIBLE",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use_header.c");
    std::fs::write(
        &src,
        "#include \"choicectl.h\"\nint main(void) { ChoicectlScenario *s = 0; (void)s; return CHOICECTL_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(result) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; header syntax check skipped");
        return;
    };
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
}
