//! C ABI over the engine: opaque position and network handles, integer
//! status codes, and a per-thread error message.
//!
//! Every function returns an [`MgStatus`]; outputs go through pointers.
//! Handles are owned by the caller and released with the matching `_free`.
//! No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mobilego::goban::{Color, Move, Position};
use mobilego::netspec::{count_params, NetworkSpec};
use mobilego::nn::Network;
use mobilego::search::{puct_search, Evaluator, SearchConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IllegalMove = 3,
    Io = 4,
    BadFormat = 5,
    GameOver = 6,
    SearchFailed = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Stone colours as integers: 0 empty, 1 black, 2 white.
pub const MG_EMPTY: i32 = 0;
pub const MG_BLACK: i32 = 1;
pub const MG_WHITE: i32 = 2;

/// Pass, in the flat move encoding where points are `row * size + col`.
pub const MG_PASS: i32 = -1;

pub struct MgPosition(Position);

pub struct MgNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: MgStatus, msg: impl Into<String>) -> MgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> MgStatus) -> MgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MgStatus::Panic, "internal panic"),
    }
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, MgStatus> {
    if p.is_null() {
        return Err(fail(MgStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MgStatus::InvalidArgument, "string is not UTF-8"))
}

fn color_code(c: Option<Color>) -> i32 {
    match c {
        None => MG_EMPTY,
        Some(Color::Black) => MG_BLACK,
        Some(Color::White) => MG_WHITE,
    }
}

fn decode_move(code: i32, size: usize) -> Result<Move, MgStatus> {
    if code == MG_PASS {
        return Ok(Move::Pass);
    }
    if code < 0 || code as usize >= size * size {
        return Err(fail(MgStatus::InvalidArgument, format!("move {} off the board", code)));
    }
    Ok(Move::from_index(code as usize, size))
}

fn encode_move(m: Move, size: usize) -> i32 {
    m.index(size).map_or(MG_PASS, |i| i as i32)
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Empty board of side `size`, Black to move.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_position_new(size: u32, out: *mut *mut MgPosition) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgStatus::NullPointer, "null output");
        }
        match Position::new(size as usize) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MgPosition(p)));
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `pos` must be null or a handle from `mg_position_new`/`mg_position_clone`
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mg_position_free(pos: *mut MgPosition) {
    if !pos.is_null() {
        drop(Box::from_raw(pos));
    }
}

/// # Safety
/// `pos` must be a live handle; `out` valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_position_clone(pos: *const MgPosition, out: *mut *mut MgPosition) -> MgStatus {
    guard(|| {
        if pos.is_null() || out.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        *out = Box::into_raw(Box::new(MgPosition((*pos).0.clone())));
        MgStatus::Ok
    })
}

/// Plays `code` (flat index or `MG_PASS`) for the side to move.
///
/// # Safety
/// `pos` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mg_position_play(pos: *mut MgPosition, code: i32) -> MgStatus {
    guard(|| {
        if pos.is_null() {
            return fail(MgStatus::NullPointer, "null position");
        }
        let p = &mut (*pos).0;
        let m = match decode_move(code, p.size()) {
            Ok(m) => m,
            Err(s) => return s,
        };
        if p.is_over() {
            return fail(MgStatus::GameOver, "game is over");
        }
        match p.play(m) {
            Ok(next) => {
                *p = next;
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::IllegalMove, e.to_string()),
        }
    })
}

/// # Safety
/// `pos` must be a live handle; `out` valid for one `bool`.
#[no_mangle]
pub unsafe extern "C" fn mg_position_is_legal(pos: *const MgPosition, code: i32, out: *mut bool) -> MgStatus {
    guard(|| {
        if pos.is_null() || out.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        let p = &(*pos).0;
        match decode_move(code, p.size()) {
            Ok(m) => {
                *out = p.is_legal(m);
                MgStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Board side, side to move (`MG_BLACK`/`MG_WHITE`) and whether two passes ended the game.
///
/// # Safety
/// `pos` must be a live handle; each output null or valid.
#[no_mangle]
pub unsafe extern "C" fn mg_position_info(pos: *const MgPosition, size: *mut u32, to_move: *mut i32, over: *mut bool) -> MgStatus {
    guard(|| {
        if pos.is_null() {
            return fail(MgStatus::NullPointer, "null position");
        }
        let p = &(*pos).0;
        if !size.is_null() {
            *size = p.size() as u32;
        }
        if !to_move.is_null() {
            *to_move = color_code(Some(p.to_move()));
        }
        if !over.is_null() {
            *over = p.is_over();
        }
        MgStatus::Ok
    })
}

/// Writes `size * size` colour codes in row-major order.
///
/// # Safety
/// `pos` must be a live handle; `out` valid for `len` integers.
#[no_mangle]
pub unsafe extern "C" fn mg_position_board(pos: *const MgPosition, out: *mut i32, len: usize) -> MgStatus {
    guard(|| {
        if pos.is_null() || out.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        let p = &(*pos).0;
        let cells = p.board().cells();
        if len < cells.len() {
            return fail(MgStatus::BufferTooSmall, format!("need {} entries", cells.len()));
        }
        for (i, c) in cells.iter().enumerate() {
            *out.add(i) = color_code(*c);
        }
        MgStatus::Ok
    })
}

/// Area score, positive when White leads after `komi`.
///
/// # Safety
/// `pos` must be a live handle; `out` valid for one float.
#[no_mangle]
pub unsafe extern "C" fn mg_position_score(pos: *const MgPosition, komi: f32, out: *mut f32) -> MgStatus {
    guard(|| {
        if pos.is_null() || out.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        *out = (*pos).0.tromp_taylor_score(komi);
        MgStatus::Ok
    })
}

/// Parameter count of a network name at the given board size.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` valid for one integer.
#[no_mangle]
pub unsafe extern "C" fn mg_count_params(name: *const c_char, board: u32, out: *mut u64) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgStatus::NullPointer, "null output");
        }
        let name = match c_str(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match NetworkSpec::parse(name) {
            Ok(spec) => {
                *out = count_params(&spec.with_board(board as usize)) as u64;
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Freshly initialized network for a name and board size.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_network_new(name: *const c_char, board: u32, seed: u64, out: *mut *mut MgNetwork) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgStatus::NullPointer, "null output");
        }
        let name = match c_str(name) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let spec = match NetworkSpec::parse(name) {
            Ok(s) => s.with_board(board as usize),
            Err(e) => return fail(MgStatus::InvalidArgument, e.to_string()),
        };
        match Network::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed)) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(MgNetwork(n)));
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn mg_network_load(path: *const c_char, out: *mut *mut MgNetwork) -> MgStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgStatus::NullPointer, "null output");
        }
        let path = match c_str(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match Network::load(Path::new(path)) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(MgNetwork(n)));
                MgStatus::Ok
            }
            Err(mobilego::nn::NnError::Io(e)) => fail(MgStatus::Io, e.to_string()),
            Err(e) => fail(MgStatus::BadFormat, e.to_string()),
        }
    })
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mg_network_save(net: *const MgNetwork, path: *const c_char) -> MgStatus {
    guard(|| {
        if net.is_null() {
            return fail(MgStatus::NullPointer, "null network");
        }
        let path = match c_str(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match (*net).0.save(Path::new(path)) {
            Ok(()) => MgStatus::Ok,
            Err(e) => fail(MgStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `net` must be null or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn mg_network_free(net: *mut MgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Move probabilities (`size * size` floats, row-major) and White's win
/// probability for one position.
///
/// # Safety
/// Handles must be live; `policy` valid for `len` floats; `value` for one.
#[no_mangle]
pub unsafe extern "C" fn mg_network_evaluate(net: *const MgNetwork, pos: *const MgPosition, policy: *mut f32, len: usize, value: *mut f32) -> MgStatus {
    guard(|| {
        if net.is_null() || pos.is_null() || policy.is_null() || value.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        let (net, p) = (&(*net).0, &(*pos).0);
        if net.spec().board != p.size() {
            return fail(MgStatus::InvalidArgument, "board size differs from the network's");
        }
        let n = p.size() * p.size();
        if len < n {
            return fail(MgStatus::BufferTooSmall, format!("need {} entries", n));
        }
        match net.evaluate(std::slice::from_ref(p)) {
            Ok(mut e) => {
                let e = e.remove(0);
                std::ptr::copy_nonoverlapping(e.policy.as_ptr(), policy, n);
                *value = e.value;
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::SearchFailed, e.to_string()),
        }
    })
}

/// Runs a search of `evaluations` network calls and writes the most-visited
/// move (flat index or `MG_PASS`).
///
/// # Safety
/// Handles must be live; `out` valid for one integer.
#[no_mangle]
pub unsafe extern "C" fn mg_search(net: *const MgNetwork, pos: *const MgPosition, evaluations: u32, out: *mut i32) -> MgStatus {
    guard(|| {
        if net.is_null() || pos.is_null() || out.is_null() {
            return fail(MgStatus::NullPointer, "null argument");
        }
        let (net, p) = (&(*net).0, &(*pos).0);
        if net.spec().board != p.size() {
            return fail(MgStatus::InvalidArgument, "board size differs from the network's");
        }
        if p.is_over() {
            return fail(MgStatus::GameOver, "game is over");
        }
        match puct_search(p, net, &SearchConfig::evaluations(evaluations as usize)) {
            Ok(r) => {
                *out = encode_move(r.moves[0].mv, p.size());
                MgStatus::Ok
            }
            Err(e) => fail(MgStatus::SearchFailed, e.to_string()),
        }
    })
}
