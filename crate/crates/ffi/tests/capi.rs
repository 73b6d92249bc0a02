use std::ffi::{CStr, CString};
use std::ptr;

use speakerkws::model::{Conditioning, KwsModel, KwsModelConfig};
use speakerkws::numerics::Tensor;
use speakerkws_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(kws_last_error_message()) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &std::path::Path, cond: Conditioning) -> (KwsModel, CString) {
    let model = KwsModel::build(&KwsModelConfig::desk(6, cond), 21).unwrap();
    let path = dir.join("m.kwt");
    model.save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn frames(n: usize, dim: usize) -> Tensor {
    Tensor::new(vec![n, dim], (0..n * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap()
}

#[test]
fn stream_matches_batch_forward() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path(), Conditioning::Film { embedding_dim: 4 });
    let embedding = [0.3, -0.2, 0.9, 0.1];
    let x = frames(25, 6);
    let batch = model.posteriors(&x, Some(&embedding)).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(kws_model_load(path.as_ptr(), &mut h), KwsStatus::Ok);
        assert_eq!(kws_model_input_dim(h), 6);
        assert_eq!(kws_model_embedding_dim(h), 4);
        assert_eq!(kws_model_num_classes(h), 2);
        let mut s = ptr::null_mut();
        assert_eq!(kws_stream_new(h, embedding.as_ptr(), 4, &mut s), KwsStatus::Ok);
        kws_model_free(h);
        let mut post = [0.0; 2];
        for f in 0..25 {
            assert_eq!(kws_stream_push(s, x.row(f).as_ptr(), 6, post.as_mut_ptr(), 2), KwsStatus::Ok);
            for (a, b) in post.iter().zip(batch.row(f)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        assert_eq!(kws_stream_frames(s), 25);
        assert_eq!(kws_stream_reset(s), KwsStatus::Ok);
        assert_eq!(kws_stream_frames(s), 0);
        kws_stream_free(s);
    }
}

#[test]
fn null_embedding_uses_constant_vector() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path(), Conditioning::Film { embedding_dim: 3 });
    let x = frames(4, 6);
    let expected = model.posteriors(&x, Some(&[0.0; 3])).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(kws_model_load(path.as_ptr(), &mut h), KwsStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(kws_stream_new(h, ptr::null(), 0, &mut s), KwsStatus::Ok);
        let mut post = [0.0; 2];
        for f in 0..4 {
            kws_stream_push(s, x.row(f).as_ptr(), 6, post.as_mut_ptr(), 2);
        }
        assert!((post[1] - expected.get2(3, 1)).abs() <= 1e-6);
        kws_stream_free(s);
        kws_model_free(h);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_model(dir.path(), Conditioning::Film { embedding_dim: 3 });
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(kws_model_load(ptr::null(), &mut h), KwsStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = CString::new(dir.path().join("nope.kwt").to_str().unwrap()).unwrap();
        assert_eq!(kws_model_load(missing.as_ptr(), &mut h), KwsStatus::Io);
        assert!(!last_error().is_empty());

        let junk = dir.path().join("junk.kwt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(kws_model_load(junk.as_ptr(), &mut h), KwsStatus::CorruptFile);

        assert_eq!(kws_model_load(path.as_ptr(), &mut h), KwsStatus::Ok);
        assert!(last_error().is_empty());
        let mut s = ptr::null_mut();
        let short = [1.0, 2.0];
        assert_eq!(kws_stream_new(h, short.as_ptr(), 2, &mut s), KwsStatus::DimensionMismatch);
        assert_eq!(kws_stream_new(h, ptr::null(), 0, &mut s), KwsStatus::Ok);
        let mut post = [0.0; 2];
        let frame = [0.0; 5];
        assert_eq!(kws_stream_push(s, frame.as_ptr(), 5, post.as_mut_ptr(), 2), KwsStatus::DimensionMismatch);
        let frame = [0.0; 6];
        assert_eq!(kws_stream_push(s, frame.as_ptr(), 6, post.as_mut_ptr(), 1), KwsStatus::DimensionMismatch);
        assert_eq!(kws_stream_push(ptr::null_mut(), frame.as_ptr(), 6, post.as_mut_ptr(), 2), KwsStatus::NullPointer);
        kws_stream_free(s);
        kws_model_free(h);
        kws_model_free(ptr::null_mut());
        kws_stream_free(ptr::null_mut());
        assert_eq!(kws_model_input_dim(ptr::null()), 0);
    }
}

#[test]
fn eer_through_the_c_abi() {
    let (pos, neg) = ([0.8, 0.4], [0.6, 0.2]);
    let (mut eer, mut t) = (f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(kws_compute_eer(pos.as_ptr(), 2, neg.as_ptr(), 2, &mut eer, &mut t), KwsStatus::Ok);
        assert_eq!(eer, 0.5);
        assert!(t > 0.4 && t <= 0.6);
        assert_eq!(kws_compute_eer(pos.as_ptr(), 0, neg.as_ptr(), 2, &mut eer, ptr::null_mut()), KwsStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/speakerkws.h")).unwrap();
    for name in [
        "kws_model_load",
        "kws_model_free",
        "kws_stream_new",
        "kws_stream_push",
        "kws_stream_reset",
        "kws_stream_free",
        "kws_compute_eer",
        "kws_last_error_message",
        "KWS_STATUS_OK",
        "typedef struct KwsModelHandle KwsModelHandle",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
