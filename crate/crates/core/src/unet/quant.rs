use half::f16;

use super::{NetWeights, Network, Precision};

/// Largest finite half-precision value.
pub const FP16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantReport {
    pub values: usize,
    /// Values beyond ±65504, clamped to the finite range.
    pub saturated: usize,
    /// Non-zero values that rounded to zero.
    pub flushed_to_zero: usize,
    pub max_abs_error: f32,
}

/// Round to the nearest half-precision value (ties to even), saturating at
/// ±65504. Subnormal halves are kept; anything below half the smallest
/// subnormal becomes a signed zero.
pub fn f16_round(v: f32) -> f32 {
    f16::from_f32(v.clamp(-FP16_MAX, FP16_MAX)).to_f32()
}

/// Quantize every weight and bias to half precision. The returned weights
/// keep f32 storage in memory but hold only fp16-representable values and
/// carry the fp16 tag, which halves their serialized size.
pub fn quantize_fp16(weights: &NetWeights) -> (NetWeights, QuantReport) {
    let mut report = QuantReport::default();
    let mut net = weights.network.clone();
    for p in net.params_mut() {
        let v = *p;
        let q = f16_round(v);
        report.values += 1;
        if v.abs() > FP16_MAX {
            report.saturated += 1;
            log::warn!("weight {v} saturated to {q} in fp16");
        } else {
            report.max_abs_error = report.max_abs_error.max((q - v).abs());
        }
        if q == 0.0 && v != 0.0 {
            report.flushed_to_zero += 1;
        }
        *p = q;
    }
    (
        NetWeights {
            network: net,
            precision: Precision::Fp16,
        },
        report,
    )
}

/// Compute-ready f32 parameters. Fp16-tagged weights are already held as
/// exactly representable f32 values, so this is a copy.
pub fn dequantize(weights: &NetWeights) -> Network<f32> {
    weights.network.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{NetTopology, ResidualConfig};

    /// Round-to-nearest-even over the fp16 grid, built from the format
    /// definition rather than a conversion library.
    fn fp16_oracle(v: f64) -> f64 {
        if v == 0.0 {
            return 0.0;
        }
        let a = v.abs().min(65504.0);
        let e = a.log2().floor().max(-14.0);
        let ulp = 2f64.powf(e - 10.0);
        let q = a / ulp;
        let r = q.floor();
        let frac = q - r;
        let n = if frac > 0.5 || (frac == 0.5 && r % 2.0 == 1.0) {
            r + 1.0
        } else {
            r
        };
        (n * ulp).copysign(v)
    }

    #[test]
    fn examples() {
        assert_eq!(f16_round(1.0), 1.0);
        assert_eq!(f16_round(1e-8), 0.0);
        assert_eq!(f16_round(1e6), FP16_MAX);
        assert_eq!(f16_round(-1e6), -FP16_MAX);
    }

    #[test]
    fn matches_grid_oracle() {
        let mut x = 1.234e-7f64;
        while x < 6e4 {
            for v in [x, -x, x * 1.0001] {
                assert_eq!(
                    f16_round(v as f32) as f64,
                    fp16_oracle(v as f32 as f64),
                    "{v}"
                );
            }
            x *= 1.37;
        }
    }

    #[test]
    fn report_counts() {
        let topo = NetTopology::new(2, 2, ResidualConfig::Conf1, 1).unwrap();
        let mut net = Network::<f32>::init(topo, 1).unwrap();
        net.layers_mut()[0].weights[0] = 1e9;
        net.layers_mut()[0].weights[1] = 1e-9;
        let w = NetWeights::new(net);
        let (q, r) = quantize_fp16(&w);
        assert_eq!(q.precision, Precision::Fp16);
        assert_eq!(r.values, w.network.param_count());
        assert_eq!(r.saturated, 1);
        assert_eq!(r.flushed_to_zero, 1);
        assert_eq!(q.stored_bytes() * 2, w.stored_bytes());
        assert!(q.network.params().all(|&p| f16_round(p) == p));
        assert_eq!(dequantize(&q), q.network);
    }
}
