use std::ffi::{CStr, CString};
use std::ptr;

use memplan_ffi::*;

const FIXTURE: &str = include_str!("../../core/tests/fixtures/three_groups.json");
const MODEL: &str = include_str!("../../../configs/toy-llada.json");

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mp_last_error_message()) }.to_string_lossy().into_owned()
}

struct Loaded {
    t: *mut MpTemplate,
    g: *mut MpGraph,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe {
            mp_graph_free(self.g);
            mp_template_free(self.t);
        }
    }
}

fn load(n: u64) -> Loaded {
    let mut t = ptr::null_mut();
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(mp_template_from_json(cstr(FIXTURE).as_ptr(), &mut t), MpStatus::Ok);
        let b = cstr(&format!("{{\"N\": {n}}}"));
        assert_eq!(mp_graph_instantiate(t, b.as_ptr(), &mut g), MpStatus::Ok);
    }
    Loaded { t, g }
}

#[test]
fn plan_round_trip() {
    let l = load(64);
    unsafe {
        let (mut groups, mut live) = (0usize, 0u64);
        assert_eq!(mp_graph_group_count(l.g, &mut groups), MpStatus::Ok);
        assert_eq!(mp_graph_max_live(l.g, &mut live), MpStatus::Ok);
        assert_eq!((groups, live), (3, 192));

        let mut p = ptr::null_mut();
        assert_eq!(mp_plan_first_fit(l.g, 1, &mut p), MpStatus::Ok);
        let mut ws = 0u64;
        assert_eq!(mp_plan_workspace_size(p, &mut ws), MpStatus::Ok);
        assert_eq!(ws, 192);

        let mut count = 0usize;
        assert_eq!(mp_plan_entry_count(p, &mut count), MpStatus::Ok);
        let mut e = MpPlanEntry::default();
        for i in 0..count {
            assert_eq!(mp_plan_entry(p, i, &mut e), MpStatus::Ok);
            assert_eq!(e.id, i);
            assert!(e.offset + e.size <= ws);
        }
        assert_eq!(mp_plan_entry(p, count, &mut e), MpStatus::OutOfRange);
        assert!(last_error().contains("entry 3"));

        let mut violations = 9usize;
        assert_eq!(mp_plan_validate(p, l.g, &mut violations), MpStatus::Ok);
        assert_eq!(violations, 0);
        assert!(last_error().is_empty());

        let mut json = ptr::null_mut();
        assert_eq!(mp_plan_to_json(p, &mut json), MpStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["workspace_size"], 192);
        mp_string_free(json);
        mp_plan_free(p);
    }
}

#[test]
fn exact_matches_lower_bound_and_respects_limit() {
    let l = load(10);
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(mp_plan_exact(l.g, 1, 10, &mut p), MpStatus::Ok);
        let mut ws = 0u64;
        mp_plan_workspace_size(p, &mut ws);
        assert_eq!(ws, 30);
        mp_plan_free(p);
        assert_eq!(mp_plan_exact(l.g, 1, 2, &mut p), MpStatus::TooLarge);
        assert!(p.is_null());
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(mp_template_from_json(ptr::null(), &mut t), MpStatus::NullArgument);
        assert_eq!(mp_template_from_json(cstr("{").as_ptr(), &mut t), MpStatus::Parse);
        assert!(t.is_null() && !last_error().is_empty());
        assert_eq!(mp_template_from_json(cstr("{}").as_ptr(), ptr::null_mut()), MpStatus::NullArgument);

        let bad = b"\xff\0";
        assert_eq!(mp_template_from_json(bad.as_ptr().cast(), &mut t), MpStatus::InvalidUtf8);

        let l = load(4);
        let mut g = ptr::null_mut();
        assert_eq!(mp_graph_instantiate(l.t, cstr("{}").as_ptr(), &mut g), MpStatus::Instantiation);
        assert_eq!(mp_graph_instantiate(l.t, cstr("[1]").as_ptr(), &mut g), MpStatus::Parse);
        assert!(g.is_null());

        let mut ws = 0u64;
        assert_eq!(mp_plan_workspace_size(ptr::null(), &mut ws), MpStatus::NullArgument);
        mp_plan_free(ptr::null_mut());
        mp_string_free(ptr::null_mut());
    }
}

#[test]
fn chunk_search_feasible_and_not() {
    let model = cstr(MODEL);
    let mut r = MpChunkResult::default();
    unsafe {
        assert_eq!(mp_chunk_search(model.as_ptr(), 16384, 0.5, 64 << 20, 1024, &mut r), MpStatus::Ok);
        assert_eq!(r.feasible, 1);
        assert!(r.final_peak <= 64 << 20);
        assert!(r.evaluations <= r.k_logits + r.k_ffn);

        assert_eq!(mp_chunk_search(model.as_ptr(), 16384, 0.5, 1 << 20, 1024, &mut r), MpStatus::Infeasible);
        assert_eq!(r.feasible, 0);
        assert!(r.final_peak > 1 << 20);
        assert_eq!(mp_chunk_search(model.as_ptr(), 16384, 0.5, 1 << 20, 0, &mut r), MpStatus::Input);
    }
}

#[test]
fn gather_gemm_matches_naive_product() {
    let (n, d, v) = (5, 3, 4);
    let h: Vec<f64> = (0..n * d).map(|i| i as f64 * 0.5 - 2.0).collect();
    let w: Vec<f64> = (0..d * v).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let idx = [4usize, 0, 2];
    let mut out = vec![0.0; idx.len() * v];
    let mut scratch = 0usize;
    let st = unsafe {
        mp_gather_gemm_f64(h.as_ptr(), n, d, w.as_ptr(), v, idx.as_ptr(), idx.len(), 2, 2, 3, out.as_mut_ptr(), &mut scratch)
    };
    assert_eq!(st, MpStatus::Ok);
    for (r, &row) in idx.iter().enumerate() {
        for c in 0..v {
            let want: f64 = (0..d).map(|k| h[row * d + k] * w[k * v + c]).sum();
            assert!((out[r * v + c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    assert!(scratch > 0 && scratch <= 2 * 2 + 2 * 3 + 2 * 3);

    let bad = [7usize];
    let st = unsafe {
        mp_gather_gemm_f64(h.as_ptr(), n, d, w.as_ptr(), v, bad.as_ptr(), 1, 2, 2, 3, out.as_mut_ptr(), ptr::null_mut())
    };
    assert_eq!(st, MpStatus::Input);
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(mp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
