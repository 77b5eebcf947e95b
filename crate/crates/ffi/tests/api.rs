use std::ffi::{CStr, CString};
use std::ptr;

use cssdf_ffi::*;

fn last_error() -> String {
    let p = cssdf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_round_trip_and_prediction() {
    unsafe {
        let mut robot = ptr::null_mut();
        assert_eq!(cssdf_robot_builtin(0, &mut robot), CssdfStatus::Ok);
        assert_eq!(cssdf_robot_dof(robot), 2);
        let mut model = ptr::null_mut();
        assert_eq!(cssdf_model_new(robot, 3, &mut model), CssdfStatus::Ok);
        assert_eq!(cssdf_model_point_dim(model), 2);

        let qs = [0.1, -0.2, 0.5, 0.3];
        let ps = [1.0, 1.0, -2.0, 0.5];
        let mut v = [0.0; 2];
        let mut v2 = [0.0; 2];
        let mut g = [0.0; 4];
        assert_eq!(cssdf_model_predict(model, qs.as_ptr(), ps.as_ptr(), 2, v.as_mut_ptr()), CssdfStatus::Ok);
        assert_eq!(
            cssdf_model_predict_with_grad(model, qs.as_ptr(), ps.as_ptr(), 2, v2.as_mut_ptr(), g.as_mut_ptr()),
            CssdfStatus::Ok
        );
        assert_eq!(v, v2);
        assert!(g.iter().all(|x| x.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(cssdf_model_save(model, path.as_ptr()), CssdfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cssdf_model_load(path.as_ptr(), &mut back), CssdfStatus::Ok);
        let mut v3 = [0.0; 2];
        assert_eq!(cssdf_model_predict(back, qs.as_ptr(), ps.as_ptr(), 2, v3.as_mut_ptr()), CssdfStatus::Ok);
        assert_eq!(v, v3);

        cssdf_model_free(back);
        cssdf_model_free(model);
        cssdf_robot_free(robot);
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    unsafe {
        let mut robot = ptr::null_mut();
        assert_eq!(cssdf_robot_builtin(9, &mut robot), CssdfStatus::InvalidInput);
        assert!(robot.is_null());
        assert!(last_error().contains("unknown built-in robot"));

        assert_eq!(cssdf_model_new(ptr::null(), 0, &mut ptr::null_mut()), CssdfStatus::NullPointer);

        let missing = CString::new("/no/such/model.ckpt").unwrap();
        assert_eq!(cssdf_model_load(missing.as_ptr(), &mut ptr::null_mut()), CssdfStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"garbage").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(cssdf_model_load(junk.as_ptr(), &mut ptr::null_mut()), CssdfStatus::Format);

        assert_eq!(cssdf_robot_builtin(0, &mut robot), CssdfStatus::Ok);
        let bad_scene = CString::new("{\"obstacles\": 3}").unwrap();
        assert_eq!(cssdf_field_oracle(robot, bad_scene.as_ptr(), 51, &mut ptr::null_mut()), CssdfStatus::InvalidInput);
        let bad_params = CString::new("{\"horizon\": 0}").unwrap();
        assert_eq!(cssdf_controller_new(robot, bad_params.as_ptr(), &mut ptr::null_mut()), CssdfStatus::InvalidInput);
        cssdf_robot_free(robot);

        // freeing null is a no-op
        cssdf_robot_free(ptr::null_mut());
        assert!(!CStr::from_ptr(cssdf_version()).to_bytes().is_empty());
    }
}

#[test]
fn controller_keeps_clear_of_an_obstacle() {
    unsafe {
        let mut robot = ptr::null_mut();
        assert_eq!(cssdf_robot_builtin(0, &mut robot), CssdfStatus::Ok);
        let scene = CString::new(r#"{"obstacles": [{"type": "sphere", "center": [2.5, 1.5], "radius": 0.4}]}"#).unwrap();
        let mut field = ptr::null_mut();
        let st = cssdf_field_oracle(robot, scene.as_ptr(), 101, &mut field);
        assert_eq!(st, CssdfStatus::Ok, "{}", last_error());
        let mut ctrl = ptr::null_mut();
        let params = CString::new("{\"horizon\": 5}").unwrap();
        assert_eq!(cssdf_controller_new(robot, params.as_ptr(), &mut ctrl), CssdfStatus::Ok);
        let h = cssdf_controller_horizon(ctrl);
        assert_eq!(h, 5);

        // drive straight at a goal behind the obstacle; the field must stay above zero
        let goal = [0.9, 0.0];
        let reference: Vec<f64> = (0..h).flat_map(|_| goal).collect();
        let mut q = [-0.3, 0.0];
        let mut min_phi = f64::INFINITY;
        for k in 0..300 {
            let t = k as f64 * 0.01;
            let mut u = [0.0; 2];
            let mut status = CssdfStepStatus::Solved;
            let st = cssdf_controller_step(ctrl, field, q.as_ptr(), t, reference.as_ptr(), u.as_mut_ptr(), &mut status);
            assert_eq!(st, CssdfStatus::Ok, "{}", last_error());
            q[0] += 0.01 * u[0];
            q[1] += 0.01 * u[1];
            let (mut phi, mut g) = (0.0, [0.0; 2]);
            assert_eq!(cssdf_field_distance(field, q.as_ptr(), t, &mut phi, g.as_mut_ptr()), CssdfStatus::Ok);
            min_phi = min_phi.min(phi);
        }
        assert!(min_phi > 0.0, "min phi {min_phi}");
        cssdf_controller_free(ctrl);
        cssdf_field_free(field);
        cssdf_robot_free(robot);
    }
}
