//! Micro-kernels: an `MR`-pixel × `NV`-vector output tile accumulated over
//! every (tap, input channel) pair. Bias seeds the accumulators and ReLU is
//! applied before the tile is stored.

use half::f16;

/// Pixels per tile, consecutive along time.
pub(crate) const MR: usize = 8;
/// Widest panel in elements.
pub(crate) const MAX_LANES: usize = 64;

/// Storage element of the engine's activations and weights.
pub(crate) trait Elem: Copy + Default + PartialOrd + Send + Sync + 'static {
    /// Panel widths the SIMD kernels support, narrowest first.
    const PANEL_LANES: &'static [usize];
    /// Weights interleave input channel pairs: `[tap][ci / 2][lane][ci % 2]`,
    /// and the SIMD kernel needs an even input channel count. Otherwise
    /// `[tap][ci][lane]`.
    const PAIRED: bool;

    /// Position of weight `(tap, ci, lane)` in a packed panel.
    #[inline]
    fn w_index(tap: usize, ci: usize, cin: usize, lanes: usize, lane: usize) -> usize {
        if Self::PAIRED {
            ((tap * cin.div_ceil(2) + ci / 2) * lanes + lane) * 2 + (ci & 1)
        } else {
            (tap * cin + ci) * lanes + lane
        }
    }

    /// Packed panel length.
    fn panel_len(taps: usize, cin: usize, lanes: usize) -> usize {
        if Self::PAIRED {
            taps * cin.div_ceil(2) * 2 * lanes
        } else {
            taps * cin * lanes
        }
    }

    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    /// SIMD kernel for full `MR` tiles, if the CPU has one.
    fn fast_kernel() -> Option<FastKernel<Self>>;

    fn add_slices(dst: &mut [Self], a: &[Self], b: &[Self]) {
        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
            *d = Self::from_f32(x.to_f32() + y.to_f32());
        }
    }
}

pub(crate) type FastKernel<E> = unsafe fn(lanes: usize, tile: &Tile<E>);

/// Panel width for `remaining` output channels.
pub(crate) fn panel_lanes<E: Elem>(remaining: usize) -> usize {
    let widths = E::PANEL_LANES;
    *widths
        .iter()
        .find(|&&w| w >= remaining)
        .unwrap_or(&widths[widths.len() - 1])
}

/// One tile invocation. Offsets are in bytes so the same table serves
/// every kernel.
pub(crate) struct Tile<'a, E> {
    /// Input pixel 0 before the tap offset.
    pub a: *const E,
    /// Bytes between consecutive pixels along time.
    pub stride: usize,
    pub taps: &'a [isize],
    pub cin: usize,
    /// Packed panel weights, see [`Elem::w_index`].
    pub w: *const E,
    pub bias: *const E,
    pub relu: bool,
    /// `[MR][lanes]`
    pub out: *mut E,
}

impl Elem for f32 {
    const PANEL_LANES: &'static [usize] = &[16, 32];
    const PAIRED: bool = false;

    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }

    fn fast_kernel() -> Option<FastKernel<Self>> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512f") {
            return Some(x86::tile_f32);
        }
        None
    }

    fn add_slices(dst: &mut [Self], a: &[Self], b: &[Self]) {
        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
            *d = x + y;
        }
    }
}

impl Elem for f16 {
    const PANEL_LANES: &'static [usize] = &[16, 32];
    const PAIRED: bool = true;

    fn from_f32(v: f32) -> Self {
        f16::from_f32(v)
    }
    fn to_f32(self) -> f32 {
        f16::to_f32(self)
    }

    fn fast_kernel() -> Option<FastKernel<Self>> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512fp16")
            && std::arch::is_x86_feature_detected!("avx512bw")
            && std::arch::is_x86_feature_detected!("avx512vl")
        {
            return Some(x86::tile_f16);
        }
        None
    }

    fn add_slices(dst: &mut [Self], a: &[Self], b: &[Self]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512fp16")
            && std::arch::is_x86_feature_detected!("avx512bw")
        {
            let n = dst.len().min(a.len()).min(b.len());
            let vec_n = n - n % 32;
            if vec_n > 0 {
                // SAFETY: the three slices hold at least `vec_n` elements.
                unsafe { x86::add_f16(dst.as_mut_ptr(), a.as_ptr(), b.as_ptr(), vec_n) };
            }
            for i in vec_n..n {
                dst[i] = f16::from_f32(a[i].to_f32() + b[i].to_f32());
            }
            return;
        }
        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
            *d = f16::from_f32(x.to_f32() + y.to_f32());
        }
    }
}

/// Scalar tile for any `mr <= MR`, accumulating in f32 and rounding once
/// on store.
///
/// # Safety
/// Every pointer in `t` must cover the tile it describes.
pub(crate) unsafe fn tile_portable<E: Elem>(mr: usize, lanes: usize, t: &Tile<'_, E>) {
    let mut acc = [[0f32; MAX_LANES]; MR];
    for row in acc.iter_mut().take(mr) {
        for (l, a) in row.iter_mut().take(lanes).enumerate() {
            *a = (*t.bias.add(l)).to_f32();
        }
    }
    for (tap, &off) in t.taps.iter().enumerate() {
        let base = (t.a as *const u8).offset(off);
        for ci in 0..t.cin {
            for (m, row) in acc.iter_mut().enumerate().take(mr) {
                let x = (*(base.add(m * t.stride) as *const E).add(ci)).to_f32();
                for (l, a) in row.iter_mut().take(lanes).enumerate() {
                    *a += x * (*t.w.add(E::w_index(tap, ci, t.cin, lanes, l))).to_f32();
                }
            }
        }
    }
    for (m, row) in acc.iter().enumerate().take(mr) {
        for (l, &v) in row.iter().enumerate().take(lanes) {
            let v = if t.relu && v < 0.0 { 0.0 } else { v };
            *t.out.add(m * lanes + l) = E::from_f32(v);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::asm;
    use std::arch::x86_64::*;

    use half::f16;

    use super::{Tile, MR};

    pub(super) unsafe fn tile_f32(lanes: usize, t: &Tile<'_, f32>) {
        match lanes {
            16 => tile_f32_nv::<1>(t),
            _ => tile_f32_nv::<2>(t),
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn tile_f32_nv<const NV: usize>(t: &Tile<'_, f32>) {
        let mut acc = [[_mm512_setzero_ps(); NV]; MR];
        for v in 0..NV {
            let b = _mm512_loadu_ps(t.bias.add(16 * v));
            for row in acc.iter_mut() {
                row[v] = b;
            }
        }
        let mut w = t.w;
        for &off in t.taps {
            let base = (t.a as *const u8).offset(off);
            for ci in 0..t.cin {
                let mut wv = [_mm512_setzero_ps(); NV];
                for (v, r) in wv.iter_mut().enumerate() {
                    *r = _mm512_loadu_ps(w.add(16 * v));
                }
                for (m, row) in acc.iter_mut().enumerate() {
                    let x = _mm512_set1_ps(*(base.add(m * t.stride) as *const f32).add(ci));
                    for v in 0..NV {
                        row[v] = _mm512_fmadd_ps(x, wv[v], row[v]);
                    }
                }
                w = w.add(16 * NV);
            }
        }
        if t.relu {
            let z = _mm512_setzero_ps();
            for row in acc.iter_mut() {
                for r in row.iter_mut() {
                    *r = _mm512_max_ps(*r, z);
                }
            }
        }
        for (m, row) in acc.iter().enumerate() {
            for (v, r) in row.iter().enumerate() {
                _mm512_storeu_ps(t.out.add((m * NV + v) * 16), *r);
            }
        }
    }

    /// Field offsets are hard-coded in the assembly below.
    #[repr(C)]
    pub(super) struct AsmArgs {
        a: *const u8,
        taps: *const isize,
        ntaps: usize,
        cin: usize,
        w: *const u8,
        bias: *const u8,
        out: *mut u8,
        relu: usize,
        stride: usize,
    }

    /// `n` must be a positive multiple of 32.
    #[target_feature(enable = "avx512f,avx512bw")]
    pub(super) unsafe fn add_f16(dst: *mut f16, a: *const f16, b: *const f16, n: usize) {
        asm!(
            "xor {i}, {i}",
            "2:",
            "vmovdqu16 zmm0, [{a} + {i}*2]",
            "vmovdqu16 zmm1, [{b} + {i}*2]",
            "vaddph zmm0, zmm0, zmm1",
            "vmovdqu16 [{d} + {i}*2], zmm0",
            "add {i}, 32",
            "cmp {i}, {n}",
            "jb 2b",
            "vzeroupper",
            a = in(reg) a,
            b = in(reg) b,
            d = in(reg) dst,
            n = in(reg) n,
            i = out(reg) _,
            out("zmm0") _,
            out("zmm1") _,
            out("zmm2") _,
            out("zmm3") _,
            out("zmm4") _,
            out("zmm5") _,
            out("zmm6") _,
            out("zmm7") _,
            out("zmm8") _,
            out("zmm9") _,
            out("zmm10") _,
            out("zmm11") _,
            out("zmm12") _,
            out("zmm13") _,
            out("zmm14") _,
            out("zmm15") _,
            out("zmm16") _,
            out("zmm17") _,
            out("zmm18") _,
            out("zmm19") _,
            out("zmm20") _,
            out("zmm21") _,
            options(nostack),
        );
    }

    pub(super) unsafe fn tile_f16(lanes: usize, t: &Tile<'_, f16>) {
        let args = AsmArgs {
            a: t.a as *const u8,
            taps: t.taps.as_ptr(),
            ntaps: t.taps.len(),
            cin: t.cin / 2,
            w: t.w as *const u8,
            bias: t.bias as *const u8,
            out: t.out as *mut u8,
            relu: t.relu as usize,
            stride: t.stride,
        };
        debug_assert!(args.ntaps > 0 && t.cin > 0 && t.cin.is_multiple_of(2));
        match lanes {
            16 => tile_f16_x16(&args),
            _ => tile_f16_x32(&args),
        }
    }

    #[target_feature(enable = "avx512f,avx512bw")]
    unsafe fn tile_f16_x16(args: &AsmArgs) {
        asm!(
            "mov {tp}, [{args} + 8]",
            "mov {nt}, [{args} + 16]",
            "mov {w}, [{args} + 32]",
            "mov {s}, [{args} + 64]",
            "lea {s3}, [{s} + {s}*2]",
            "vpxord zmm0, zmm0, zmm0",
            "vpxord zmm1, zmm1, zmm1",
            "vpxord zmm2, zmm2, zmm2",
            "vpxord zmm3, zmm3, zmm3",
            "vpxord zmm4, zmm4, zmm4",
            "vpxord zmm5, zmm5, zmm5",
            "vpxord zmm6, zmm6, zmm6",
            "vpxord zmm7, zmm7, zmm7",
            "2:",
            "mov {p0}, [{tp}]",
            "add {p0}, [{args}]",
            "lea {p4}, [{p0} + {s}*4]",
            "mov {ci}, [{args} + 24]",
            "3:",
            "vmovdqu16 zmm16, [{w} + 0]",
            "vpbroadcastd zmm18, dword ptr [{p0}]",
            "vfmadd231ph zmm0, zmm16, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p0} + {s}]",
            "vfmadd231ph zmm1, zmm16, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p0} + {s}*2]",
            "vfmadd231ph zmm2, zmm16, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p0} + {s3}]",
            "vfmadd231ph zmm3, zmm16, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p4}]",
            "vfmadd231ph zmm4, zmm16, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p4} + {s}]",
            "vfmadd231ph zmm5, zmm16, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p4} + {s}*2]",
            "vfmadd231ph zmm6, zmm16, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p4} + {s3}]",
            "vfmadd231ph zmm7, zmm16, zmm19",
            "add {p0}, 4",
            "add {p4}, 4",
            "add {w}, 64",
            "dec {ci}",
            "jnz 3b",
            "add {tp}, 8",
            "dec {nt}",
            "jnz 2b",
            "mov {tmp}, [{args} + 40]",
            "vmovdqu16 ymm16, [{tmp} + 0]",
            "vpsrld zmm21, zmm0, 16",
            "vaddph zmm0, zmm0, zmm21",
            "vpmovdw ymm0, zmm0",
            "vaddph ymm0, ymm0, ymm16",
            "vpsrld zmm21, zmm1, 16",
            "vaddph zmm1, zmm1, zmm21",
            "vpmovdw ymm1, zmm1",
            "vaddph ymm1, ymm1, ymm16",
            "vpsrld zmm21, zmm2, 16",
            "vaddph zmm2, zmm2, zmm21",
            "vpmovdw ymm2, zmm2",
            "vaddph ymm2, ymm2, ymm16",
            "vpsrld zmm21, zmm3, 16",
            "vaddph zmm3, zmm3, zmm21",
            "vpmovdw ymm3, zmm3",
            "vaddph ymm3, ymm3, ymm16",
            "vpsrld zmm21, zmm4, 16",
            "vaddph zmm4, zmm4, zmm21",
            "vpmovdw ymm4, zmm4",
            "vaddph ymm4, ymm4, ymm16",
            "vpsrld zmm21, zmm5, 16",
            "vaddph zmm5, zmm5, zmm21",
            "vpmovdw ymm5, zmm5",
            "vaddph ymm5, ymm5, ymm16",
            "vpsrld zmm21, zmm6, 16",
            "vaddph zmm6, zmm6, zmm21",
            "vpmovdw ymm6, zmm6",
            "vaddph ymm6, ymm6, ymm16",
            "vpsrld zmm21, zmm7, 16",
            "vaddph zmm7, zmm7, zmm21",
            "vpmovdw ymm7, zmm7",
            "vaddph ymm7, ymm7, ymm16",
            "cmp qword ptr [{args} + 56], 0",
            "je 4f",
            "vpxord ymm20, ymm20, ymm20",
            "vmaxph ymm0, ymm0, ymm20",
            "vmaxph ymm1, ymm1, ymm20",
            "vmaxph ymm2, ymm2, ymm20",
            "vmaxph ymm3, ymm3, ymm20",
            "vmaxph ymm4, ymm4, ymm20",
            "vmaxph ymm5, ymm5, ymm20",
            "vmaxph ymm6, ymm6, ymm20",
            "vmaxph ymm7, ymm7, ymm20",
            "4:",
            "mov {tmp}, [{args} + 48]",
            "vmovdqu16 [{tmp} + 0], ymm0",
            "vmovdqu16 [{tmp} + 32], ymm1",
            "vmovdqu16 [{tmp} + 64], ymm2",
            "vmovdqu16 [{tmp} + 96], ymm3",
            "vmovdqu16 [{tmp} + 128], ymm4",
            "vmovdqu16 [{tmp} + 160], ymm5",
            "vmovdqu16 [{tmp} + 192], ymm6",
            "vmovdqu16 [{tmp} + 224], ymm7",
            "vzeroupper",
            args = in(reg) args as *const AsmArgs,
            tp = out(reg) _,
            nt = out(reg) _,
            w = out(reg) _,
            s = out(reg) _,
            s3 = out(reg) _,
            p0 = out(reg) _,
            p4 = out(reg) _,
            ci = out(reg) _,
            tmp = out(reg) _,
            out("zmm0") _,
            out("zmm1") _,
            out("zmm2") _,
            out("zmm3") _,
            out("zmm4") _,
            out("zmm5") _,
            out("zmm6") _,
            out("zmm7") _,
            out("zmm8") _,
            out("zmm9") _,
            out("zmm10") _,
            out("zmm11") _,
            out("zmm12") _,
            out("zmm13") _,
            out("zmm14") _,
            out("zmm15") _,
            out("zmm16") _,
            out("zmm17") _,
            out("zmm18") _,
            out("zmm19") _,
            out("zmm20") _,
            out("zmm21") _,
            options(nostack),
        );
    }

    #[target_feature(enable = "avx512f,avx512bw")]
    unsafe fn tile_f16_x32(args: &AsmArgs) {
        asm!(
            "mov {tp}, [{args} + 8]",
            "mov {nt}, [{args} + 16]",
            "mov {w}, [{args} + 32]",
            "mov {s}, [{args} + 64]",
            "lea {s3}, [{s} + {s}*2]",
            "vpxord zmm0, zmm0, zmm0",
            "vpxord zmm1, zmm1, zmm1",
            "vpxord zmm2, zmm2, zmm2",
            "vpxord zmm3, zmm3, zmm3",
            "vpxord zmm4, zmm4, zmm4",
            "vpxord zmm5, zmm5, zmm5",
            "vpxord zmm6, zmm6, zmm6",
            "vpxord zmm7, zmm7, zmm7",
            "vpxord zmm8, zmm8, zmm8",
            "vpxord zmm9, zmm9, zmm9",
            "vpxord zmm10, zmm10, zmm10",
            "vpxord zmm11, zmm11, zmm11",
            "vpxord zmm12, zmm12, zmm12",
            "vpxord zmm13, zmm13, zmm13",
            "vpxord zmm14, zmm14, zmm14",
            "vpxord zmm15, zmm15, zmm15",
            "2:",
            "mov {p0}, [{tp}]",
            "add {p0}, [{args}]",
            "lea {p4}, [{p0} + {s}*4]",
            "mov {ci}, [{args} + 24]",
            "3:",
            "vmovdqu16 zmm16, [{w} + 0]",
            "vmovdqu16 zmm17, [{w} + 64]",
            "vpbroadcastd zmm18, dword ptr [{p0}]",
            "vfmadd231ph zmm0, zmm16, zmm18",
            "vfmadd231ph zmm1, zmm17, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p0} + {s}]",
            "vfmadd231ph zmm2, zmm16, zmm19",
            "vfmadd231ph zmm3, zmm17, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p0} + {s}*2]",
            "vfmadd231ph zmm4, zmm16, zmm18",
            "vfmadd231ph zmm5, zmm17, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p0} + {s3}]",
            "vfmadd231ph zmm6, zmm16, zmm19",
            "vfmadd231ph zmm7, zmm17, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p4}]",
            "vfmadd231ph zmm8, zmm16, zmm18",
            "vfmadd231ph zmm9, zmm17, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p4} + {s}]",
            "vfmadd231ph zmm10, zmm16, zmm19",
            "vfmadd231ph zmm11, zmm17, zmm19",
            "vpbroadcastd zmm18, dword ptr [{p4} + {s}*2]",
            "vfmadd231ph zmm12, zmm16, zmm18",
            "vfmadd231ph zmm13, zmm17, zmm18",
            "vpbroadcastd zmm19, dword ptr [{p4} + {s3}]",
            "vfmadd231ph zmm14, zmm16, zmm19",
            "vfmadd231ph zmm15, zmm17, zmm19",
            "add {p0}, 4",
            "add {p4}, 4",
            "add {w}, 128",
            "dec {ci}",
            "jnz 3b",
            "add {tp}, 8",
            "dec {nt}",
            "jnz 2b",
            "mov {tmp}, [{args} + 40]",
            "vmovdqu16 ymm16, [{tmp} + 0]",
            "vmovdqu16 ymm17, [{tmp} + 32]",
            "vpsrld zmm21, zmm0, 16",
            "vaddph zmm0, zmm0, zmm21",
            "vpmovdw ymm0, zmm0",
            "vaddph ymm0, ymm0, ymm16",
            "vpsrld zmm21, zmm1, 16",
            "vaddph zmm1, zmm1, zmm21",
            "vpmovdw ymm1, zmm1",
            "vaddph ymm1, ymm1, ymm17",
            "vpsrld zmm21, zmm2, 16",
            "vaddph zmm2, zmm2, zmm21",
            "vpmovdw ymm2, zmm2",
            "vaddph ymm2, ymm2, ymm16",
            "vpsrld zmm21, zmm3, 16",
            "vaddph zmm3, zmm3, zmm21",
            "vpmovdw ymm3, zmm3",
            "vaddph ymm3, ymm3, ymm17",
            "vpsrld zmm21, zmm4, 16",
            "vaddph zmm4, zmm4, zmm21",
            "vpmovdw ymm4, zmm4",
            "vaddph ymm4, ymm4, ymm16",
            "vpsrld zmm21, zmm5, 16",
            "vaddph zmm5, zmm5, zmm21",
            "vpmovdw ymm5, zmm5",
            "vaddph ymm5, ymm5, ymm17",
            "vpsrld zmm21, zmm6, 16",
            "vaddph zmm6, zmm6, zmm21",
            "vpmovdw ymm6, zmm6",
            "vaddph ymm6, ymm6, ymm16",
            "vpsrld zmm21, zmm7, 16",
            "vaddph zmm7, zmm7, zmm21",
            "vpmovdw ymm7, zmm7",
            "vaddph ymm7, ymm7, ymm17",
            "vpsrld zmm21, zmm8, 16",
            "vaddph zmm8, zmm8, zmm21",
            "vpmovdw ymm8, zmm8",
            "vaddph ymm8, ymm8, ymm16",
            "vpsrld zmm21, zmm9, 16",
            "vaddph zmm9, zmm9, zmm21",
            "vpmovdw ymm9, zmm9",
            "vaddph ymm9, ymm9, ymm17",
            "vpsrld zmm21, zmm10, 16",
            "vaddph zmm10, zmm10, zmm21",
            "vpmovdw ymm10, zmm10",
            "vaddph ymm10, ymm10, ymm16",
            "vpsrld zmm21, zmm11, 16",
            "vaddph zmm11, zmm11, zmm21",
            "vpmovdw ymm11, zmm11",
            "vaddph ymm11, ymm11, ymm17",
            "vpsrld zmm21, zmm12, 16",
            "vaddph zmm12, zmm12, zmm21",
            "vpmovdw ymm12, zmm12",
            "vaddph ymm12, ymm12, ymm16",
            "vpsrld zmm21, zmm13, 16",
            "vaddph zmm13, zmm13, zmm21",
            "vpmovdw ymm13, zmm13",
            "vaddph ymm13, ymm13, ymm17",
            "vpsrld zmm21, zmm14, 16",
            "vaddph zmm14, zmm14, zmm21",
            "vpmovdw ymm14, zmm14",
            "vaddph ymm14, ymm14, ymm16",
            "vpsrld zmm21, zmm15, 16",
            "vaddph zmm15, zmm15, zmm21",
            "vpmovdw ymm15, zmm15",
            "vaddph ymm15, ymm15, ymm17",
            "cmp qword ptr [{args} + 56], 0",
            "je 4f",
            "vpxord ymm20, ymm20, ymm20",
            "vmaxph ymm0, ymm0, ymm20",
            "vmaxph ymm1, ymm1, ymm20",
            "vmaxph ymm2, ymm2, ymm20",
            "vmaxph ymm3, ymm3, ymm20",
            "vmaxph ymm4, ymm4, ymm20",
            "vmaxph ymm5, ymm5, ymm20",
            "vmaxph ymm6, ymm6, ymm20",
            "vmaxph ymm7, ymm7, ymm20",
            "vmaxph ymm8, ymm8, ymm20",
            "vmaxph ymm9, ymm9, ymm20",
            "vmaxph ymm10, ymm10, ymm20",
            "vmaxph ymm11, ymm11, ymm20",
            "vmaxph ymm12, ymm12, ymm20",
            "vmaxph ymm13, ymm13, ymm20",
            "vmaxph ymm14, ymm14, ymm20",
            "vmaxph ymm15, ymm15, ymm20",
            "4:",
            "mov {tmp}, [{args} + 48]",
            "vmovdqu16 [{tmp} + 0], ymm0",
            "vmovdqu16 [{tmp} + 32], ymm1",
            "vmovdqu16 [{tmp} + 64], ymm2",
            "vmovdqu16 [{tmp} + 96], ymm3",
            "vmovdqu16 [{tmp} + 128], ymm4",
            "vmovdqu16 [{tmp} + 160], ymm5",
            "vmovdqu16 [{tmp} + 192], ymm6",
            "vmovdqu16 [{tmp} + 224], ymm7",
            "vmovdqu16 [{tmp} + 256], ymm8",
            "vmovdqu16 [{tmp} + 288], ymm9",
            "vmovdqu16 [{tmp} + 320], ymm10",
            "vmovdqu16 [{tmp} + 352], ymm11",
            "vmovdqu16 [{tmp} + 384], ymm12",
            "vmovdqu16 [{tmp} + 416], ymm13",
            "vmovdqu16 [{tmp} + 448], ymm14",
            "vmovdqu16 [{tmp} + 480], ymm15",
            "vzeroupper",
            args = in(reg) args as *const AsmArgs,
            tp = out(reg) _,
            nt = out(reg) _,
            w = out(reg) _,
            s = out(reg) _,
            s3 = out(reg) _,
            p0 = out(reg) _,
            p4 = out(reg) _,
            ci = out(reg) _,
            tmp = out(reg) _,
            out("zmm0") _,
            out("zmm1") _,
            out("zmm2") _,
            out("zmm3") _,
            out("zmm4") _,
            out("zmm5") _,
            out("zmm6") _,
            out("zmm7") _,
            out("zmm8") _,
            out("zmm9") _,
            out("zmm10") _,
            out("zmm11") _,
            out("zmm12") _,
            out("zmm13") _,
            out("zmm14") _,
            out("zmm15") _,
            out("zmm16") _,
            out("zmm17") _,
            out("zmm18") _,
            out("zmm19") _,
            out("zmm20") _,
            out("zmm21") _,
            options(nostack),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case<E> {
        input: Vec<E>,
        w: Vec<E>,
        bias: Vec<E>,
        taps: Vec<isize>,
        cin: usize,
        stride: usize,
    }

    fn case<E: Elem>(seed: u64, lanes: usize, cin: usize) -> Case<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pix_stride = cin + 3;
        let taps_el = [0isize, 1, (MR + 2) as isize * pix_stride as isize];
        let n = (MR + 2) * pix_stride * 3;
        let mut r = |s: f32| E::from_f32(rng.gen_range(-s..s));
        Case {
            input: (0..n).map(|_| r(1.0)).collect(),
            w: (0..E::panel_len(taps_el.len(), cin, lanes))
                .map(|_| r(0.5))
                .collect(),
            bias: (0..lanes).map(|_| r(0.5)).collect(),
            taps: taps_el
                .iter()
                .map(|&o| o * std::mem::size_of::<E>() as isize)
                .collect(),
            cin,
            stride: pix_stride * std::mem::size_of::<E>(),
        }
    }

    fn oracle<E: Elem>(c: &Case<E>, lanes: usize, relu: bool) -> Vec<f64> {
        let es = std::mem::size_of::<E>() as isize;
        let mut out = vec![0.0; MR * lanes];
        for m in 0..MR {
            for l in 0..lanes {
                let mut s = c.bias[l].to_f32() as f64;
                for (ti, &off) in c.taps.iter().enumerate() {
                    for ci in 0..c.cin {
                        let idx = (off / es) as usize + m * c.stride / es as usize + ci;
                        s += c.input[idx].to_f32() as f64
                            * c.w[E::w_index(ti, ci, c.cin, lanes, l)].to_f32() as f64;
                    }
                }
                out[m * lanes + l] = if relu { s.max(0.0) } else { s };
            }
        }
        out
    }

    fn run<E: Elem>(
        c: &Case<E>,
        lanes: usize,
        relu: bool,
        fast: Option<FastKernel<E>>,
    ) -> Vec<f64> {
        let mut out = vec![E::default(); MR * lanes];
        let t = Tile {
            a: c.input.as_ptr(),
            stride: c.stride,
            taps: &c.taps,
            cin: c.cin,
            w: c.w.as_ptr(),
            bias: c.bias.as_ptr(),
            relu,
            out: out.as_mut_ptr(),
        };
        unsafe {
            match fast {
                Some(k) => k(lanes, &t),
                None => tile_portable(MR, lanes, &t),
            }
        }
        out.iter().map(|v| v.to_f32() as f64).collect()
    }

    fn check<E: Elem>(tol: f64) {
        for &lanes in E::PANEL_LANES {
            for (seed, cin) in [(1, 1), (2, 2), (3, 5), (4, 18), (5, 33)] {
                let c = case::<E>(seed, lanes, cin);
                for relu in [false, true] {
                    let want = oracle(&c, lanes, relu);
                    let mut kernels = vec![None];
                    if let Some(k) = E::fast_kernel() {
                        if !E::PAIRED || cin % 2 == 0 {
                            kernels.push(Some(k));
                        }
                    }
                    for k in kernels {
                        let got = run(&c, lanes, relu, k);
                        for (g, w) in got.iter().zip(&want) {
                            assert!((g - w).abs() <= tol * (1.0 + w.abs()), "{g} vs {w}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn f32_tiles_match_oracle() {
        check::<f32>(1e-5);
    }

    #[test]
    fn f16_tiles_match_oracle() {
        // fp16 accumulation over up to 99 products
        check::<f16>(2e-2);
    }
}
