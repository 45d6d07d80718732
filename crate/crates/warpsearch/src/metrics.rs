//! Evaluation metrics: windowed SSIM, mask IoU, a chi-square tail helper for
//! statistical tests, and the flat metric-record format run directories use.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// SSIM window size (11x11 Gaussian).
pub const SSIM_WINDOW: usize = 11;
/// Gaussian sigma for the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of the images fed to SSIM (values in `[0, 1]`).
pub const SSIM_L: f64 = 1.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    w
}

/// Mean SSIM between two `(C, H, W)` images in `[0, 1]`.
///
/// Gaussian-weighted 11x11 windows, valid positions only (no padding),
/// averaged over channels and window positions.  Images must be at least
/// 11x11.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument {
            op: "ssim",
            message: format!("image shapes {:?} and {:?} disagree", a.dim(), b.dim()),
        });
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument {
            op: "ssim",
            message: format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"),
        });
    }

    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let out_h = h - SSIM_WINDOW + 1;
    let out_w = w - SSIM_WINDOW + 1;

    // Separable weighted moments: horizontal pass, then vertical.
    let mut total = 0.0;
    for ci in 0..c {
        let pa = a.index_axis(ndarray::Axis(0), ci);
        let pb = b.index_axis(ndarray::Axis(0), ci);
        // Row-filtered moments at (h, out_w).
        let mut ra = Array2::<f64>::zeros((h, out_w));
        let mut rb = Array2::<f64>::zeros((h, out_w));
        let mut raa = Array2::<f64>::zeros((h, out_w));
        let mut rbb = Array2::<f64>::zeros((h, out_w));
        let mut rab = Array2::<f64>::zeros((h, out_w));
        for y in 0..h {
            for x in 0..out_w {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for (k, wk) in win.iter().enumerate() {
                    let va = pa[[y, x + k]] as f64;
                    let vb = pb[[y, x + k]] as f64;
                    sa += wk * va;
                    sb += wk * vb;
                    saa += wk * va * va;
                    sbb += wk * vb * vb;
                    sab += wk * va * vb;
                }
                ra[[y, x]] = sa;
                rb[[y, x]] = sb;
                raa[[y, x]] = saa;
                rbb[[y, x]] = sbb;
                rab[[y, x]] = sab;
            }
        }
        for y in 0..out_h {
            for x in 0..out_w {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut m_aa = 0.0;
                let mut m_bb = 0.0;
                let mut m_ab = 0.0;
                for (k, wk) in win.iter().enumerate() {
                    mu_a += wk * ra[[y + k, x]];
                    mu_b += wk * rb[[y + k, x]];
                    m_aa += wk * raa[[y + k, x]];
                    m_bb += wk * rbb[[y + k, x]];
                    m_ab += wk * rab[[y + k, x]];
                }
                let var_a = m_aa - mu_a * mu_a;
                let var_b = m_bb - mu_b * mu_b;
                let cov = m_ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
            }
        }
    }
    Ok(total / (c * out_h * out_w) as f64)
}

/// Direct-summation SSIM used as the oracle in tests: identical definition,
/// computed window by window without the separable pass.
pub fn ssim_reference(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument {
            op: "ssim_reference",
            message: "image shapes disagree".to_string(),
        });
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument {
            op: "ssim_reference",
            message: "images too small".to_string(),
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let out_h = h - SSIM_WINDOW + 1;
    let out_w = w - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for ci in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut m_aa = 0.0;
                let mut m_bb = 0.0;
                let mut m_ab = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wk = win[ky] * win[kx];
                        let va = a[[ci, y + ky, x + kx]] as f64;
                        let vb = b[[ci, y + ky, x + kx]] as f64;
                        mu_a += wk * va;
                        mu_b += wk * vb;
                        m_aa += wk * va * va;
                        m_bb += wk * vb * vb;
                        m_ab += wk * va * vb;
                    }
                }
                let var_a = m_aa - mu_a * mu_a;
                let var_b = m_bb - mu_b * mu_b;
                let cov = m_ab - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            }
        }
    }
    Ok(total / (c * out_h * out_w) as f64)
}

/// Intersection-over-union of two soft masks thresholded at 0.5.
/// Two empty masks count as a perfect match.
pub fn mask_iou(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument {
            op: "mask_iou",
            message: format!("mask shapes {:?} and {:?} disagree", a.dim(), b.dim()),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (va, vb) in a.iter().zip(b.iter()) {
        let ba = *va >= 0.5;
        let bb = *vb >= 0.5;
        inter += (ba && bb) as u64;
        union += (ba || bb) as u64;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Survival function of the chi-square distribution: `P(X > x)` with `df`
/// degrees of freedom, via the regularized incomplete gamma function.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - lower_regularized_gamma(df / 2.0, x / 2.0)
}

/// Regularized lower incomplete gamma `P(a, x)` by series (x < a + 1) or
/// continued fraction (otherwise); standard special-function evaluation.
fn lower_regularized_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        // Series expansion.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        (sum.ln() + a * x.ln() - x - ln_gamma_a).exp()
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (a * x.ln() - x - ln_gamma_a).exp() * h;
        1.0 - q
    }
}

/// Lanczos approximation of `ln Gamma(x)` for positive `x`.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_5e-2,
        -0.539_523_938_495_3e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015;
    for g in G {
        y += 1.0;
        ser += g / y;
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// One metric observation, stored one per line as
/// `run,split,category,name,step,value`.  `category` and `step` may be
/// empty.  Fields must not contain commas or newlines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run: String,
    pub split: String,
    pub category: Option<String>,
    pub name: String,
    pub step: Option<u64>,
    pub value: f64,
}

impl MetricRecord {
    fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("run", &self.run),
            ("split", &self.split),
            ("name", &self.name),
        ] {
            if value.contains(',') || value.contains('\n') || value.is_empty() {
                return Err(Error::Argument {
                    op: "MetricRecord",
                    message: format!("field {field} is empty or contains a delimiter: {value:?}"),
                });
            }
        }
        if let Some(c) = &self.category {
            if c.contains(',') || c.contains('\n') {
                return Err(Error::Argument {
                    op: "MetricRecord",
                    message: format!("category contains a delimiter: {c:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Data(format!(
                "metric line needs 6 fields, got {}: {line:?}",
                parts.len()
            )));
        }
        let step = if parts[4].is_empty() {
            None
        } else {
            Some(parts[4].parse().map_err(|_| {
                Error::Data(format!("metric step is not an integer: {line:?}"))
            })?)
        };
        let value: f64 = parts[5]
            .parse()
            .map_err(|_| Error::Data(format!("metric value is not a number: {line:?}")))?;
        Ok(MetricRecord {
            run: parts[0].to_string(),
            split: parts[1].to_string(),
            category: if parts[2].is_empty() {
                None
            } else {
                Some(parts[2].to_string())
            },
            name: parts[3].to_string(),
            step,
            value,
        })
    }
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.run,
            self.split,
            self.category.as_deref().unwrap_or(""),
            self.name,
            self.step.map(|s| s.to_string()).unwrap_or_default(),
            self.value
        )
    }
}

/// Append records to a metrics file, creating it (with a header) if needed.
pub fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let ctx = || format!("writing metrics {}", path.display());
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(ctx()))?;
    if fresh {
        writeln!(f, "run,split,category,name,step,value").map_err(Error::io(ctx()))?;
    }
    for r in records {
        r.validate()?;
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.run,
            r.split,
            r.category.as_deref().unwrap_or(""),
            r.name,
            r.step.map(|s| s.to_string()).unwrap_or_default(),
            r.value
        )
        .map_err(Error::io(ctx()))?;
    }
    Ok(())
}

/// Read every record from a metrics file written by [`append_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let ctx = || format!("reading metrics {}", path.display());
    let f = std::fs::File::open(path).map_err(Error::io(ctx()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(ctx()))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        out.push(MetricRecord::parse(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one() {
        let a = rand_image(3, 16, 20, 1);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "self-SSIM must be 1, got {s}");
    }

    #[test]
    fn ssim_matches_closed_form_for_constant_images() {
        // Constant images have zero variance, so SSIM reduces to the
        // luminance term (2 u1 u2 + C1) / (u1^2 + u2^2 + C1).
        let a = Array3::from_elem((1, 12, 12), 0.5f32);
        let b = Array3::from_elem((1, 12, 12), 0.7f32);
        let c1 = (SSIM_K1 * SSIM_L).powi(2);
        let want = (2.0 * 0.5 * 0.7 + c1) / (0.25 + 0.49 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn ssim_penalizes_noise_monotonically() {
        let a = rand_image(1, 24, 24, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noisy = |amp: f32, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut b = a.clone();
            b.mapv_inplace(|v| (v + amp * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0));
            b
        };
        let light = ssim(&a, &noisy(0.1, &mut rng)).unwrap();
        let heavy = ssim(&a, &noisy(0.8, &mut rng)).unwrap();
        assert!(light > heavy, "more noise must lower SSIM: {light} vs {heavy}");
        assert!(heavy < 0.9 && light > heavy);
    }

    #[test]
    fn separable_ssim_agrees_with_direct_summation_oracle() {
        for seed in 0..4u64 {
            let a = rand_image(3, 20, 17, 100 + seed);
            let b = rand_image(3, 20, 17, 200 + seed);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b).unwrap();
            assert!(
                (fast - slow).abs() < 1e-6,
                "seed {seed}: separable {fast} vs direct {slow}"
            );
        }
    }

    #[test]
    fn ssim_rejects_undersized_and_mismatched_images() {
        let a = rand_image(1, 10, 16, 5);
        assert!(ssim(&a, &a).is_err(), "10 rows is below the window size");
        let b = rand_image(1, 16, 16, 6);
        let c = rand_image(1, 16, 17, 7);
        assert!(ssim(&b, &c).is_err(), "shape mismatch must error");
    }

    #[test]
    fn mask_iou_handles_overlap_disjoint_and_empty() {
        let mut a = Array2::<f32>::zeros((4, 4));
        let mut b = Array2::<f32>::zeros((4, 4));
        a[[0, 0]] = 1.0;
        a[[0, 1]] = 1.0;
        b[[0, 1]] = 1.0;
        b[[0, 2]] = 1.0;
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let empty = Array2::<f32>::zeros((4, 4));
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn chi_square_tail_matches_reference_values() {
        // df=2 has the closed form exp(-x/2).
        for x in [0.5, 2.0, 9.21] {
            let got = chi_square_sf(x, 2.0);
            let want = (-x / 2.0f64).exp();
            assert!((got - want).abs() < 1e-10, "df2 at {x}: {got} vs {want}");
        }
        // Standard table values.
        assert!((chi_square_sf(3.841, 1.0) - 0.05).abs() < 5e-4);
        assert!((chi_square_sf(11.345, 3.0) - 0.01).abs() < 5e-4);
        assert!((chi_square_sf(0.0, 5.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_records_round_trip_through_a_file() {
        let dir = std::env::temp_dir().join("warpsearch-metrics-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        std::fs::remove_file(&path).ok();
        let records = vec![
            MetricRecord {
                run: "train-warp".into(),
                split: "train".into(),
                category: None,
                name: "loss_total".into(),
                step: Some(10),
                value: 0.75,
            },
            MetricRecord {
                run: "eval".into(),
                split: "val".into(),
                category: Some("long_sleeve".into()),
                name: "warp_ssim".into(),
                step: None,
                value: 0.8125,
            },
        ];
        append_metrics(&path, &records[..1]).unwrap();
        append_metrics(&path, &records[1..]).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, records);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn metric_records_reject_delimiter_pollution() {
        let bad = MetricRecord {
            run: "a,b".into(),
            split: "train".into(),
            category: None,
            name: "x".into(),
            step: None,
            value: 1.0,
        };
        let dir = std::env::temp_dir().join("warpsearch-metrics-reject");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        assert!(append_metrics(&path, &[bad]).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
