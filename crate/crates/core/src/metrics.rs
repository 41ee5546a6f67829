//! Image and token metrics.

use rayon::prelude::*;

use crate::datagen::ObjectRecord;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::sampler::{Pipeline, SamplerConfig, Schedule};
use crate::sequence::DEFAULT_I2MV_PROMPT;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Pixels with `max - min` channel spread below this count as background.
pub const FOREGROUND_CHROMA: f64 = 0.25;
pub const PALETTE_BINS: usize = 12;

fn check_same(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )))
    }
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`] for identical images.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn luma(img: &ImageGrid) -> Vec<f64> {
    let c = img.channels();
    img.data()
        .chunks_exact(c)
        .map(|p| {
            if c >= 3 {
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            } else {
                p[0]
            }
        })
        .collect()
}

/// Single-scale SSIM on luma with a uniform 8x8 window at stride 1.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let (la, lb) = (luma(a), luma(b));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (x, y) = (la[r * w + c], lb[r * w + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of positions whose ids agree, over all grids.
pub fn token_accuracy(pred: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} grids vs {}", pred.len(), truth.len())));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::Shape(format!("grid of {} ids vs {}", p.len(), t.len())));
        }
        hits += p.iter().zip(t).filter(|(x, y)| x == y).count();
        total += p.len();
    }
    if total == 0 {
        return Err(Error::Shape("no tokens to compare".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Palette bin of a foreground pixel, or `None` for background.
///
/// The dataset palette is twelve hues 30 degrees apart and shading only scales
/// intensity, so the nearest palette colour is the nearest hue.
pub fn palette_bin(rgb: &[f64]) -> Option<usize> {
    let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma < FOREGROUND_CHROMA {
        return None;
    }
    let h = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    Some(((h * 2.0).round() as usize) % PALETTE_BINS)
}

/// Normalised palette histogram of a view's foreground pixels.
pub fn palette_histogram(img: &ImageGrid) -> Option<[f64; PALETTE_BINS]> {
    let mut hist = [0.0; PALETTE_BINS];
    let mut n = 0usize;
    for px in img.data().chunks_exact(img.channels()) {
        if let Some(bin) = palette_bin(px) {
            hist[bin] += 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    hist.iter_mut().for_each(|v| *v /= n as f64);
    Some(hist)
}

/// One minus the mean pairwise total-variation distance between the views'
/// palette histograms.
pub fn cross_view_consistency(views: &[ImageGrid]) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 views, got {}", views.len())));
    }
    let hists = views
        .iter()
        .enumerate()
        .map(|(i, v)| palette_histogram(v).ok_or(Error::UndefinedView(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            let tv: f64 = hists[i].iter().zip(&hists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            sum += tv;
            pairs += 1;
        }
    }
    Ok(1.0 - sum / pairs as f64)
}

/// Mean scores of one schedule over every (object, seed) sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub schedule: Schedule,
    pub psnr: f64,
    pub ssim: f64,
    pub token_acc: f64,
    pub consistency: f64,
    pub n_samples: usize,
}

pub const ABLATION_HEADER: &str = "schedule,psnr,ssim,token_acc,consistency,n_samples";

/// Runs image-to-views sampling over `objects x seeds` for each schedule and
/// averages PSNR and SSIM (generated vs rendered views), token accuracy (vs
/// the tokenized renders) and cross-view consistency. A generated set with an
/// empty view scores consistency 0.
pub fn ablate_schedules(
    pipe: &Pipeline<'_>,
    objects: &[ObjectRecord],
    steps: usize,
    temperature: f64,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if objects.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one object and one seed".into()));
    }
    let truth = objects
        .iter()
        .map(|o| {
            o.i2mv_targets()
                .iter()
                .map(|v| pipe.vocab.visual_ids(&pipe.tokenizer.encode(v)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(Schedule, usize, u64)> = Schedule::ALL
        .iter()
        .flat_map(|&s| (0..objects.len()).flat_map(move |o| seeds.iter().map(move |&seed| (s, o, seed))))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(schedule, o, seed)| {
            let obj = &objects[o];
            let cfg = SamplerConfig {
                steps,
                schedule,
                temperature,
                seed,
            };
            let out = pipe.sample_i2mv(obj.reference(), DEFAULT_I2MV_PROMPT, &cfg)?;
            let targets = obj.i2mv_targets();
            let mut p = 0.0;
            let mut q = 0.0;
            for (g, t) in out.images.iter().zip(&targets) {
                p += psnr(g, t)?;
                q += ssim(g, t)?;
            }
            let n = targets.len() as f64;
            let consistency = match cross_view_consistency(&out.images) {
                Ok(c) => c,
                Err(Error::UndefinedView(_)) => 0.0,
                Err(e) => return Err(e),
            };
            Ok([p / n, q / n, token_accuracy(&out.tokens, &truth[o])?, consistency])
        })
        .collect::<Result<Vec<_>>>()?;
    let per = objects.len() * seeds.len();
    Ok(Schedule::ALL
        .iter()
        .zip(scores.chunks(per))
        .map(|(&schedule, chunk)| {
            let mean = |k: usize| chunk.iter().map(|s| s[k]).sum::<f64>() / per as f64;
            AblationRow {
                schedule,
                psnr: mean(0),
                ssim: mean(1),
                token_acc: mean(2),
                consistency: mean(3),
                n_samples: per,
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.schedule, r.psnr, r.ssim, r.token_acc, r.consistency, r.n_samples
        ));
    }
    out
}
