use std::ffi::{c_char, CString};
use std::ptr;

use vipamin_ffi::*;

const GRID: (usize, usize) = (2, 2);
const PATCH_DIM: usize = 3;
const D: usize = 8;

fn backbone(seed: u64) -> *mut VptBackbone {
    let mut h = ptr::null_mut();
    let s = unsafe { vpt_backbone_random(2, D, 2, 16, GRID.0, GRID.1, PATCH_DIM, 3, seed, &mut h) };
    assert_eq!(s, VptStatus::Ok);
    assert!(!h.is_null());
    h
}

fn images(n: usize) -> Vec<f64> {
    (0..n * GRID.0 * GRID.1 * PATCH_DIM)
        .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
        .collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { vpt_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn prompt_values(p: *const VptPrompts) -> (usize, usize, Vec<f64>) {
    let (mut r, mut c) = (0, 0);
    assert_eq!(unsafe { vpt_prompts_shape(p, &mut r, &mut c) }, VptStatus::Ok);
    let mut buf = vec![0.0; r * c];
    assert_eq!(unsafe { vpt_prompts_copy(p, buf.as_mut_ptr(), buf.len()) }, VptStatus::Ok);
    (r, c, buf)
}

#[test]
fn dims_report_the_configuration() {
    let h = backbone(1);
    let (mut np, mut pd, mut d, mut depth) = (0, 0, 0, 0);
    let s = unsafe { vpt_backbone_dims(h, &mut np, &mut pd, &mut d, &mut depth) };
    assert_eq!(s, VptStatus::Ok);
    assert_eq!((np, pd, d, depth), (4, PATCH_DIM, D, 2));
    // Null outputs are skipped.
    let s = unsafe { vpt_backbone_dims(h, ptr::null_mut(), ptr::null_mut(), &mut d, ptr::null_mut()) };
    assert_eq!(s, VptStatus::Ok);
    unsafe { vpt_backbone_free(h) };
}

#[test]
fn vipamin_init_uses_one_forward_pass() {
    let h = backbone(2);
    let imgs = images(5);
    let before = unsafe { vpt_backbone_forward_count(h) };
    let mut p = ptr::null_mut();
    let s = unsafe { vpt_vipamin_init(h, imgs.as_ptr(), 5, 4, 2, 1.0, 7, &mut p) };
    assert_eq!(s, VptStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { vpt_backbone_forward_count(h) } - before, 1);
    let (r, c, v) = prompt_values(p);
    assert_eq!((r, c), (4, D));
    assert!(v.iter().all(|x| x.is_finite()));
    unsafe {
        vpt_prompts_free(p);
        vpt_backbone_free(h);
    }
}

#[test]
fn orthogonal_prompts_have_lower_energy_than_matched_ones() {
    let h = backbone(3);
    let imgs = images(4);
    let energy = |lambda: f64| {
        let mut p = ptr::null_mut();
        let mut e = f64::NAN;
        unsafe {
            assert_eq!(vpt_vipamin_init(h, imgs.as_ptr(), 4, 3, 5, lambda, 0, &mut p), VptStatus::Ok);
            assert_eq!(vpt_projection_energy(h, p, imgs.as_ptr(), 4, &mut e), VptStatus::Ok);
            vpt_prompts_free(p);
        }
        e
    };
    let matched = energy(0.0);
    let blended = energy(1.0);
    assert!((0.0..=1.0 + 1e-12).contains(&matched));
    assert!(blended < matched, "blended {blended} vs matched {matched}");
    unsafe { vpt_backbone_free(h) };
}

#[test]
fn identical_calls_return_identical_prompts() {
    let h = backbone(4);
    let imgs = images(3);
    let run = || {
        let mut p = ptr::null_mut();
        unsafe { assert_eq!(vpt_spt_rand_init(h, imgs.as_ptr(), 3, 2, 9, &mut p), VptStatus::Ok) };
        let v = prompt_values(p);
        unsafe { vpt_prompts_free(p) };
        v
    };
    assert_eq!(run(), run());
    unsafe { vpt_backbone_free(h) };
}

#[test]
fn prompts_survive_an_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.vpt").to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    unsafe { assert_eq!(vpt_xavier_init(3, D, 5, &mut p), VptStatus::Ok) };
    unsafe { assert_eq!(vpt_prompts_save(p, path.as_ptr()), VptStatus::Ok) };
    let mut q = ptr::null_mut();
    unsafe { assert_eq!(vpt_prompts_load(path.as_ptr(), 0, &mut q), VptStatus::Ok) };
    let (a, b) = (prompt_values(p), prompt_values(q));
    assert_eq!(a.2.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
               b.2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { vpt_prompts_load(path.as_ptr(), 1, &mut r) }, VptStatus::InvalidArgument);
    assert!(r.is_null());
    unsafe {
        vpt_prompts_free(p);
        vpt_prompts_free(q);
    }
}

#[test]
fn corrupted_archive_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("p.vpt");
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(vpt_xavier_init(2, D, 0, &mut p), VptStatus::Ok);
        assert_eq!(vpt_prompts_save(p, path.as_ptr()), VptStatus::Ok);
        vpt_prompts_free(p);
    }
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { vpt_prompts_load(path.as_ptr(), 0, &mut q) }, VptStatus::Io);
    assert!(!last_error().is_empty());

    let mut b = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.vpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vpt_backbone_load(missing.as_ptr(), &mut b) }, VptStatus::Io);
}

#[test]
fn invalid_arguments_are_reported() {
    let h = backbone(5);
    let imgs = images(2);
    let mut p = ptr::null_mut();
    // k above the token count.
    let s = unsafe { vpt_vipamin_init(h, imgs.as_ptr(), 2, 2, 99, 1.0, 0, &mut p) };
    assert_eq!(s, VptStatus::InvalidArgument);
    assert!(p.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { vpt_vipamin_init(ptr::null(), imgs.as_ptr(), 2, 2, 2, 1.0, 0, &mut p) },
               VptStatus::NullPointer);
    assert_eq!(unsafe { vpt_vipamin_init(h, ptr::null(), 2, 2, 2, 1.0, 0, &mut p) },
               VptStatus::NullPointer);
    assert_eq!(unsafe { vpt_vipamin_init(h, imgs.as_ptr(), 0, 2, 2, 1.0, 0, &mut p) },
               VptStatus::InvalidArgument);
    assert_eq!(unsafe { vpt_backbone_random(1, 6, 4, 8, 2, 2, 3, 2, 0, &mut ptr::null_mut()) },
               VptStatus::InvalidArgument);

    let mut q = ptr::null_mut();
    unsafe { assert_eq!(vpt_xavier_init(2, D, 0, &mut q), VptStatus::Ok) };
    let mut small = [0.0; 3];
    assert_eq!(unsafe { vpt_prompts_copy(q, small.as_mut_ptr(), small.len()) },
               VptStatus::BufferTooSmall);
    unsafe {
        vpt_prompts_free(q);
        vpt_backbone_free(h);
        // Freeing null is a no-op.
        vpt_backbone_free(ptr::null_mut());
        vpt_prompts_free(ptr::null_mut());
    }
    assert_eq!(unsafe { vpt_backbone_forward_count(ptr::null()) }, 0);
}

#[test]
fn success_clears_the_last_error() {
    let mut p = ptr::null_mut();
    unsafe { assert_eq!(vpt_xavier_init(2, 0, 0, &mut p), VptStatus::InvalidArgument) };
    assert!(!last_error().is_empty());
    unsafe { assert_eq!(vpt_xavier_init(2, D, 0, &mut p), VptStatus::Ok) };
    assert!(last_error().is_empty());
    // A null buffer still reports the length.
    assert_eq!(unsafe { vpt_last_error(ptr::null_mut(), 0) }, 0);
    unsafe { vpt_prompts_free(p) };
}

#[test]
fn generated_header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vipamin.h")).unwrap();
    for name in [
        "VptBackbone", "VptPrompts", "VPT_STATUS_OK", "vpt_backbone_load", "vpt_backbone_free",
        "vpt_vipamin_init", "vpt_spt_rand_init", "vpt_xavier_init", "vpt_projection_energy",
        "vpt_prompts_copy", "vpt_prompts_save", "vpt_prompts_load", "vpt_last_error",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    // The header is valid C when a compiler is available.
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vipamin.h"))
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
