//! C ABI over the `acis` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`,
//! `*_load` or `*_generate` and released with the matching `*_free`.
//! Every fallible call returns an [`AcisStatus`]; on failure a message is
//! kept per thread and read with [`acis_last_error_message`]. Panics are
//! caught at the boundary and reported as [`AcisStatus::Panic`].
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the access the function
//! documents; strings are NUL-terminated UTF-8. Null handles and null
//! required pointers are rejected with [`AcisStatus::NullPointer`]. Handles
//! are not thread-safe and must not be used after being freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString, OsString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use acis::actor::Actor;
use acis::environment::{generate_scene, SceneContext};
use acis::experiments::RunConfig;
use acis::scoring::{sbd, BinaryMask};
use acis::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    Scene = 6,
    Diverged = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Run configuration.
pub struct AcisConfig(RunConfig);

/// Actor network: encoder, recurrent core, latent heads and decoder.
pub struct AcisActor(Actor);

/// A generated scene with its precomputed auxiliary channels.
pub struct AcisScene(Arc<SceneContext>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior NULs removed"));
}

fn status_of(e: &Error) -> AcisStatus {
    match e {
        Error::Io(_) | Error::Csv(_) => AcisStatus::Io,
        Error::Checkpoint(_) => AcisStatus::Checkpoint,
        Error::SceneFile(_) | Error::SceneGeneration(_) => AcisStatus::Scene,
        Error::Config(_) => AcisStatus::Config,
        Error::InvalidArgument(_) => AcisStatus::InvalidArgument,
        Error::Diverged(_) => AcisStatus::Diverged,
    }
}

struct Failure(AcisStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: AcisStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AcisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AcisStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AcisStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(AcisStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AcisStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(AcisStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(AcisStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(AcisStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn acis_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a configuration holding the defaults.
#[no_mangle]
pub unsafe extern "C" fn acis_config_new(out: *mut *mut AcisConfig) -> AcisStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(AcisConfig(RunConfig::default())));
        Ok(())
    })
}

/// Loads an INI configuration file.
#[no_mangle]
pub unsafe extern "C" fn acis_config_load(path: *const c_char, out: *mut *mut AcisConfig) -> AcisStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let cfg = RunConfig::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AcisConfig(cfg)));
        Ok(())
    })
}

/// Sets one key from its textual value, then validates the whole
/// configuration; on failure the configuration is left unchanged.
#[no_mangle]
pub unsafe extern "C" fn acis_config_set(cfg: *mut AcisConfig, key: *const c_char, value: *const c_char) -> AcisStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "config")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Copies the textual value of `key` into `buf` (NUL-terminated).
/// `out_len` receives the value length without the terminator; when `len`
/// is too small nothing is copied and `ACIS_STATUS_BUFFER_TOO_SMALL` is
/// returned. `buf` may be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn acis_config_get(
    cfg: *const AcisConfig,
    key: *const c_char,
    buf: *mut c_char,
    len: usize,
    out_len: *mut usize,
) -> AcisStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let key = str_arg(key, "key")?;
        out_ptr(out_len, "out_len")?;
        let value = cfg
            .0
            .get(key)
            .ok_or_else(|| fail(AcisStatus::Config, format!("unknown configuration key {key:?}")))?;
        *out_len = value.len();
        if len < value.len() + 1 {
            return Err(fail(AcisStatus::BufferTooSmall, format!("value needs {} bytes", value.len() + 1)));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(value.as_ptr(), buf.cast::<u8>(), value.len());
        *buf.add(value.len()) = 0;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn acis_config_free(cfg: *mut AcisConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialised actor with the architecture of `cfg`.
#[no_mangle]
pub unsafe extern "C" fn acis_actor_new(cfg: *const AcisConfig, seed: u64, out: *mut *mut AcisActor) -> AcisStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        out_ptr(out, "out")?;
        let actor = Actor::new(cfg.0.arch(), seed)?;
        *out = Box::into_raw(Box::new(AcisActor(actor)));
        Ok(())
    })
}

/// Loads an actor checkpoint.
#[no_mangle]
pub unsafe extern "C" fn acis_actor_load(path: *const c_char, out: *mut *mut AcisActor) -> AcisStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let actor = Actor::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AcisActor(actor)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn acis_actor_save(actor: *const AcisActor, path: *const c_char) -> AcisStatus {
    guard(|| {
        let actor = handle(actor, "actor")?;
        let path = str_arg(path, "path")?;
        actor.0.save(Path::new(path))?;
        Ok(())
    })
}

/// Image size the actor expects.
#[no_mangle]
pub unsafe extern "C" fn acis_actor_size(actor: *const AcisActor, height: *mut usize, width: *mut usize) -> AcisStatus {
    guard(|| {
        let actor = handle(actor, "actor")?;
        out_ptr(height, "height")?;
        out_ptr(width, "width")?;
        *height = actor.0.arch.height;
        *width = actor.0.arch.width;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn acis_actor_free(actor: *mut AcisActor) {
    if !actor.is_null() {
        drop(Box::from_raw(actor));
    }
}

/// Generates the scene that `seed` yields under the scene keys of `cfg`.
#[no_mangle]
pub unsafe extern "C" fn acis_scene_generate(cfg: *const AcisConfig, seed: u64, out: *mut *mut AcisScene) -> AcisStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        out_ptr(out, "out")?;
        let scene = generate_scene(seed, &cfg.0.scene_config())?;
        let ctx = SceneContext::with_aux_noise(scene, cfg.0.aux_noise);
        *out = Box::into_raw(Box::new(AcisScene(ctx)));
        Ok(())
    })
}

/// Height, width and instance count of a scene.
#[no_mangle]
pub unsafe extern "C" fn acis_scene_size(
    scene: *const AcisScene,
    height: *mut usize,
    width: *mut usize,
    instances: *mut usize,
) -> AcisStatus {
    guard(|| {
        let s = &handle(scene, "scene")?.0.scene;
        out_ptr(height, "height")?;
        out_ptr(width, "width")?;
        out_ptr(instances, "instances")?;
        *height = s.height();
        *width = s.width();
        *instances = s.instance_count();
        Ok(())
    })
}

/// Copies the row-major grayscale image into `buf` of `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn acis_scene_image(scene: *const AcisScene, buf: *mut f64, len: usize) -> AcisStatus {
    guard(|| {
        let data = handle(scene, "scene")?.0.scene.image.data();
        if len < data.len() {
            return Err(fail(AcisStatus::BufferTooSmall, format!("image needs {} values", data.len())));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Copies ground-truth mask `index` into `buf` as 0/1 bytes, row-major.
#[no_mangle]
pub unsafe extern "C" fn acis_scene_mask(scene: *const AcisScene, index: usize, buf: *mut u8, len: usize) -> AcisStatus {
    guard(|| {
        let s = &handle(scene, "scene")?.0.scene;
        let mask = s.gt_masks.get(index).ok_or_else(|| {
            fail(
                AcisStatus::InvalidArgument,
                format!("mask index {index} out of range for {} instances", s.instance_count()),
            )
        })?;
        write_mask(mask, buf, len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn acis_scene_free(scene: *mut AcisScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

unsafe fn write_mask(mask: &BinaryMask, buf: *mut u8, len: usize) -> Result<(), Failure> {
    let bits = mask.bits();
    if len < bits.len() {
        return Err(fail(AcisStatus::BufferTooSmall, format!("mask needs {} bytes", bits.len())));
    }
    out_ptr(buf, "buf")?;
    let out = std::slice::from_raw_parts_mut(buf, bits.len());
    for (o, &b) in out.iter_mut().zip(bits) {
        *o = u8::from(b);
    }
    Ok(())
}

unsafe fn read_masks(ptr: *const u8, count: usize, height: usize, width: usize, what: &str) -> Result<Vec<BinaryMask>, Failure> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if ptr.is_null() {
        return Err(fail(AcisStatus::NullPointer, format!("{what} is null")));
    }
    let n = height * width;
    let bytes = std::slice::from_raw_parts(ptr, count * n);
    Ok(bytes
        .chunks(n)
        .map(|c| BinaryMask::new(height, width, c.iter().map(|&b| b != 0).collect()))
        .collect())
}

/// Segments `scene` with mean actions and the learned stop signal, for at
/// most `max_steps` steps. Writes up to `capacity` masks of `H·W` bytes
/// into `masks`; `out_count` receives the number of predicted instances.
/// If more were predicted than fit, nothing is written and
/// `ACIS_STATUS_BUFFER_TOO_SMALL` is returned.
#[no_mangle]
pub unsafe extern "C" fn acis_segment(
    actor: *const AcisActor,
    scene: *const AcisScene,
    max_steps: usize,
    masks: *mut u8,
    capacity: usize,
    out_count: *mut usize,
) -> AcisStatus {
    guard(|| {
        let actor = handle(actor, "actor")?;
        let scene = handle(scene, "scene")?;
        out_ptr(out_count, "out_count")?;
        let (h, w) = (scene.0.height(), scene.0.width());
        if (h, w) != (actor.0.arch.height, actor.0.arch.width) {
            return Err(fail(
                AcisStatus::InvalidArgument,
                format!("scene is {h}x{w} but the actor expects {}x{}", actor.0.arch.height, actor.0.arch.width),
            ));
        }
        let preds = actor.0.infer_episode(&scene.0, max_steps);
        *out_count = preds.len();
        if preds.len() > capacity {
            return Err(fail(AcisStatus::BufferTooSmall, format!("{} masks predicted", preds.len())));
        }
        for (k, p) in preds.iter().enumerate() {
            write_mask(p, masks.add(k * h * w), h * w)?;
        }
        Ok(())
    })
}

/// Symmetric best Dice between two sets of `H·W` byte masks.
#[no_mangle]
pub unsafe extern "C" fn acis_sbd(
    preds: *const u8,
    n_preds: usize,
    gts: *const u8,
    n_gts: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> AcisStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if height == 0 || width == 0 {
            return Err(fail(AcisStatus::InvalidArgument, "mask size must be positive"));
        }
        let p = read_masks(preds, n_preds, height, width, "preds")?;
        let g = read_masks(gts, n_gts, height, width, "gts")?;
        *out = sbd(&p, &g);
        Ok(())
    })
}

/// Runs the command-line front end with `argv[0..argc]` and returns its
/// exit code (0 success, 1 usage or configuration error, 2 training abort).
#[no_mangle]
pub unsafe extern "C" fn acis_cli_main(argc: c_int, argv: *const *const c_char) -> c_int {
    let args = (|| -> Result<Vec<OsString>, Failure> {
        if argc < 0 || (argc > 0 && argv.is_null()) {
            return Err(fail(AcisStatus::NullPointer, "argv is null"));
        }
        (0..argc as usize)
            .map(|i| str_arg(*argv.add(i), "argument").map(OsString::from))
            .collect()
    })();
    match args {
        Ok(a) => match catch_unwind(|| acis::experiments::cli::run(a)) {
            Ok(code) => code,
            Err(_) => {
                set_error("panic in command-line run");
                1
            }
        },
        Err(Failure(_, msg)) => {
            set_error(msg);
            1
        }
    }
}
