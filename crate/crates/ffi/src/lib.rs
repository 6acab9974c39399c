//! C ABI over the transmitter and receiver halves of `semcom`.
//!
//! Every fallible call returns a [`SemcomStatus`]; on failure the message is
//! available from [`semcom_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use semcom::channel::{budget_for_rate, pack, unpack, Packet};
use semcom::decoder::{Decoder, DecoderConfig};
use semcom::masker::{build_mask, extract_cls_attention};
use semcom::tensor::Tensor;
use semcom::vit::{AttentionScale, VitConfig, VitEncoder};
use semcom::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemcomStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Shape = 3,
    Numerical = 4,
    CorruptPacket = 5,
    Precondition = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for SemcomStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) => Self::Argument,
            Error::Shape(_) => Self::Shape,
            Error::Numerical(_) => Self::Numerical,
            Error::CorruptPacket(_) => Self::CorruptPacket,
            Error::Precondition(_) => Self::Precondition,
            Error::Config(_) => Self::Config,
            Error::Format(_) => Self::Format,
            Error::Io(_) => Self::Io,
        }
    }
}

/// Encoder geometry. `attention_scale` is 0 for `sqrt(D)`, 1 for
/// `sqrt(D / H)`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SemcomVitConfig {
    pub embed_dim: u32,
    pub heads: u32,
    pub layers: u32,
    pub mlp_hidden: u32,
    pub num_classes: u32,
    pub patch: u32,
    pub height: u32,
    pub width: u32,
    pub attention_scale: u32,
}

impl SemcomVitConfig {
    fn to_rust(self) -> Result<VitConfig, Error> {
        let attention_scale = match self.attention_scale {
            0 => AttentionScale::Embed,
            1 => AttentionScale::Head,
            s => return Err(Error::Config(format!("attention_scale {s} is not 0 or 1"))),
        };
        let cfg = VitConfig {
            embed_dim: self.embed_dim as usize,
            heads: self.heads as usize,
            layers: self.layers as usize,
            mlp_hidden: self.mlp_hidden as usize,
            num_classes: self.num_classes as usize,
            patch: self.patch as usize,
            height: self.height as usize,
            width: self.width as usize,
            attention_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<VitConfig> for SemcomVitConfig {
    fn from(c: VitConfig) -> Self {
        Self {
            embed_dim: c.embed_dim as u32,
            heads: c.heads as u32,
            layers: c.layers as u32,
            mlp_hidden: c.mlp_hidden as u32,
            num_classes: c.num_classes as u32,
            patch: c.patch as u32,
            height: c.height as u32,
            width: c.width as u32,
            attention_scale: match c.attention_scale {
                AttentionScale::Embed => 0,
                AttentionScale::Head => 1,
            },
        }
    }
}

/// Trained encoder plus masking policy.
pub struct SemcomEncoder {
    inner: VitEncoder,
}

/// Receiver-side reconstruction network.
pub struct SemcomDecoder {
    inner: Decoder,
}

/// One parsed or freshly built packet.
pub struct SemcomPacket {
    inner: Packet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard<F>(f: F) -> SemcomStatus
where
    F: FnOnce() -> Result<(), (SemcomStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SemcomStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SemcomStatus::Panic
        }
    }
}

fn lift(e: Error) -> (SemcomStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (SemcomStatus, String) {
    (SemcomStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (SemcomStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (SemcomStatus::Argument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn semcom_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn semcom_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default toy encoder geometry to `out`.
///
/// # Safety
/// `out` must be NULL or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn semcom_vit_config_default(out: *mut SemcomVitConfig) -> SemcomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees it is writable.
        unsafe { out.write(VitConfig::default().into()) };
        Ok(())
    })
}

/// Number of patches sent at `rate` out of `num_patches`.
///
/// # Safety
/// `out` must be NULL or point to a writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn semcom_budget_for_rate(
    rate: f64,
    num_patches: u32,
    out: *mut u32,
) -> SemcomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = budget_for_rate(rate, num_patches as usize).map_err(lift)?;
        // SAFETY: checked non-null.
        unsafe { out.write(n as u32) };
        Ok(())
    })
}

/// Loads an encoder checkpoint written with geometry `config`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `config` readable, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn semcom_encoder_load(
    path: *const c_char,
    config: *const SemcomVitConfig,
    out: *mut *mut SemcomEncoder,
) -> SemcomStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return Err(null("config or out"));
        }
        // SAFETY: upheld by caller.
        let path = unsafe { path_arg(path) }?;
        // SAFETY: checked non-null.
        let cfg = unsafe { config.read() }.to_rust().map_err(lift)?;
        let inner = VitEncoder::load(cfg, &path).map_err(lift)?;
        let handle = Box::into_raw(Box::new(SemcomEncoder { inner }));
        // SAFETY: checked non-null.
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// # Safety
/// `enc` must be NULL or a handle from [`semcom_encoder_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn semcom_encoder_free(enc: *mut SemcomEncoder) {
    if !enc.is_null() {
        // SAFETY: handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(enc) });
    }
}

/// Encodes one `(3, h, w)` channel-major image, selects patches at
/// `(rate, alpha)` with random fill from `seed`, and packs them.
///
/// # Safety
/// `pixels` must point to `len` readable floats, `enc` must be a live
/// handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn semcom_encoder_transmit(
    enc: *const SemcomEncoder,
    pixels: *const f32,
    len: usize,
    rate: f64,
    alpha: f64,
    seed: u64,
    image_id: u32,
    out: *mut *mut SemcomPacket,
) -> SemcomStatus {
    guard(|| {
        if enc.is_null() || pixels.is_null() || out.is_null() {
            return Err(null("enc, pixels or out"));
        }
        // SAFETY: live handle per contract.
        let enc = unsafe { &(*enc).inner };
        let c = enc.config();
        // SAFETY: caller guarantees `len` readable floats.
        let data = unsafe { std::slice::from_raw_parts(pixels, len) };
        let image = Tensor::from_f32(&[3, c.height, c.width], data).map_err(lift)?;
        let encoded = enc.encode(&image).map_err(lift)?;
        let g = c.grid();
        let scores = extract_cls_attention(&encoded.attn, g.rows, g.cols).map_err(lift)?;
        let budget = budget_for_rate(rate, g.num_patches()).map_err(lift)?;
        let sel = build_mask(&scores, budget, alpha, seed).map_err(lift)?;
        let packet = pack(&encoded.z, &sel.mask, image_id).map_err(lift)?;
        let handle = Box::into_raw(Box::new(SemcomPacket { inner: packet }));
        // SAFETY: checked non-null.
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// Parses wire bytes into a packet.
///
/// # Safety
/// `bytes` must point to `len` readable bytes, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_parse(
    bytes: *const u8,
    len: usize,
    out: *mut *mut SemcomPacket,
) -> SemcomStatus {
    guard(|| {
        if bytes.is_null() || out.is_null() {
            return Err(null("bytes or out"));
        }
        // SAFETY: caller guarantees `len` readable bytes.
        let data = unsafe { std::slice::from_raw_parts(bytes, len) };
        let inner = Packet::from_bytes(data).map_err(lift)?;
        let handle = Box::into_raw(Box::new(SemcomPacket { inner }));
        // SAFETY: checked non-null.
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// Serializes `packet`. `*out_len` always receives the encoded size; if
/// `buf` is NULL or `cap` is smaller, nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `packet` must be live, `buf` NULL or writable for `cap` bytes,
/// `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_serialize(
    packet: *const SemcomPacket,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> SemcomStatus {
    guard(|| {
        if packet.is_null() || out_len.is_null() {
            return Err(null("packet or out_len"));
        }
        // SAFETY: live handle per contract.
        let bytes = unsafe { &(*packet).inner }.to_bytes();
        // SAFETY: checked non-null.
        unsafe { out_len.write(bytes.len()) };
        if buf.is_null() || cap < bytes.len() {
            return Err((
                SemcomStatus::BufferTooSmall,
                format!("packet needs {} bytes, buffer has {cap}", bytes.len()),
            ));
        }
        // SAFETY: `buf` holds at least `bytes.len()` writable bytes.
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len()) };
        Ok(())
    })
}

/// Number of patch tokens the packet carries, or 0 for NULL.
///
/// # Safety
/// `packet` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_n_selected(packet: *const SemcomPacket) -> u32 {
    // SAFETY: live or null per contract.
    unsafe { packet.as_ref() }.map_or(0, |p| p.inner.n_selected() as u32)
}

/// Patch count `P` from the header, or 0 for NULL.
///
/// # Safety
/// `packet` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_num_patches(packet: *const SemcomPacket) -> u32 {
    // SAFETY: live or null per contract.
    unsafe { packet.as_ref() }.map_or(0, |p| p.inner.num_patches() as u32)
}

/// Image id from the header, or 0 for NULL.
///
/// # Safety
/// `packet` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_image_id(packet: *const SemcomPacket) -> u32 {
    // SAFETY: live or null per contract.
    unsafe { packet.as_ref() }.map_or(0, |p| p.inner.image_id())
}

/// # Safety
/// `packet` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn semcom_packet_free(packet: *mut SemcomPacket) {
    if !packet.is_null() {
        // SAFETY: handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(packet) });
    }
}

/// Loads a decoder checkpoint for tokens of width `embed_dim` on a
/// `height x width` image cut into `patch x patch` patches.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn semcom_decoder_load(
    path: *const c_char,
    embed_dim: u32,
    height: u32,
    width: u32,
    patch: u32,
    out: *mut *mut SemcomDecoder,
) -> SemcomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: upheld by caller.
        let path = unsafe { path_arg(path) }?;
        let (h, w, p) = (height as usize, width as usize, patch as usize);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err((
                SemcomStatus::Config,
                format!("{height}x{width} is not divisible by patch {patch}"),
            ));
        }
        let cfg = DecoderConfig {
            embed_dim: embed_dim as usize,
            rows: h / p,
            cols: w / p,
            patch: p,
        };
        let inner = Decoder::load(cfg, &path).map_err(lift)?;
        let handle = Box::into_raw(Box::new(SemcomDecoder { inner }));
        // SAFETY: checked non-null.
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// # Safety
/// `dec` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn semcom_decoder_free(dec: *mut SemcomDecoder) {
    if !dec.is_null() {
        // SAFETY: handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(dec) });
    }
}

/// Reconstructs the `(3, h, w)` image from `packet` into `out`, which must
/// hold `3 * h * w` floats (`cap`).
///
/// # Safety
/// `dec` and `packet` must be live, `out` writable for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn semcom_decoder_reconstruct(
    dec: *const SemcomDecoder,
    packet: *const SemcomPacket,
    out: *mut f32,
    cap: usize,
) -> SemcomStatus {
    guard(|| {
        if dec.is_null() || packet.is_null() || out.is_null() {
            return Err(null("dec, packet or out"));
        }
        // SAFETY: live handles per contract.
        let (dec, packet) = unsafe { (&(*dec).inner, &(*packet).inner) };
        let c = dec.config();
        let need = 3 * c.rows * c.patch * c.cols * c.patch;
        if cap < need {
            return Err((
                SemcomStatus::BufferTooSmall,
                format!("image needs {need} floats, buffer has {cap}"),
            ));
        }
        let (z_hat, _) = unpack(packet, c.rows, c.cols).map_err(lift)?;
        let image = dec.decode(&z_hat).map_err(lift)?;
        let values = image.to_f32_vec();
        // SAFETY: `out` holds at least `need` floats.
        unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
        Ok(())
    })
}
