//! Ensemble attack strategies combining the spatial CNN with the
//! DCT-Transformer during training: cascade, parallel routing, and two
//! blending variants that also consume the cover image.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackCache, AttackNet};
use crate::error::{Error, Result};

/// Ensemble routing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Cascade,
    Parallel,
    RandomBlend,
    AggregateBlend,
}

/// Which image the complementary draw in Random Blend decides first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryDraw {
    #[default]
    Watermarked,
    Cover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
    /// Routing threshold for the watermarked image; the DCT-Transformer
    /// runs when the uniform draw exceeds it.
    pub r_w: f64,
    /// Routing threshold for the cover image (used when `primary_draw`
    /// is [`PrimaryDraw::Cover`]).
    pub r_co: f64,
    #[serde(default)]
    pub primary_draw: PrimaryDraw,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            mode: EnsembleMode::Parallel,
            r_w: 0.7,
            r_co: 0.7,
            primary_draw: PrimaryDraw::Watermarked,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_w) || !(0.0..=1.0).contains(&self.r_co) {
            return Err(Error::config(format!(
                "ensemble thresholds must lie in [0,1], got r_w={} r_co={}",
                self.r_w, self.r_co
            )));
        }
        Ok(())
    }
}

/// Which branch an image was routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    Cnn,
    DctTransformer,
}

impl Route {
    fn other(self) -> Route {
        match self {
            Route::Cnn => Route::DctTransformer,
            Route::DctTransformer => Route::Cnn,
        }
    }
}

/// Everything the trainer needs to backpropagate one ensemble forward, plus
/// the routing decisions for reproducibility checks.
pub struct EnsembleTrace {
    pub mode: EnsembleMode,
    /// Route taken by the watermarked image (parallel/blends) or the whole
    /// cascade order marker.
    pub wm_route: Option<Route>,
    pub cover_route: Option<Route>,
    pub beta: Option<f64>,
    caches: EnsembleCaches,
}

enum EnsembleCaches {
    Cascade {
        dct: AttackCache,
        cnn: AttackCache,
    },
    Parallel {
        cache: AttackCache,
    },
    Blend {
        wm_cache: AttackCache,
        cover_cache: AttackCache,
    },
}

/// The CNN + DCT-Transformer pair addressed by the ensemble strategies.
pub struct AttackPair {
    pub cnn: AttackNet,
    pub dct_transformer: AttackNet,
}

impl AttackPair {
    fn net(&self, route: Route) -> &AttackNet {
        match route {
            Route::Cnn => &self.cnn,
            Route::DctTransformer => &self.dct_transformer,
        }
    }

    fn net_mut(&mut self, route: Route) -> &mut AttackNet {
        match route {
            Route::Cnn => &mut self.cnn,
            Route::DctTransformer => &mut self.dct_transformer,
        }
    }
}

/// Fixed cascade: DCT-Transformer first, then the CNN.
pub fn cascade(pair: &AttackPair, wm: &Array4<f64>) -> (Array4<f64>, EnsembleTrace) {
    let (mid, dct_cache) = pair.dct_transformer.forward(wm);
    let (out, cnn_cache) = pair.cnn.forward(&mid);
    (
        out,
        EnsembleTrace {
            mode: EnsembleMode::Cascade,
            wm_route: None,
            cover_route: None,
            beta: None,
            caches: EnsembleCaches::Cascade {
                dct: dct_cache,
                cnn: cnn_cache,
            },
        },
    )
}

/// Draws the route for one image: DCT-Transformer iff `u > threshold`.
fn draw_route(threshold: f64, rng: &mut impl Rng) -> Route {
    if rng.gen::<f64>() > threshold {
        Route::DctTransformer
    } else {
        Route::Cnn
    }
}

/// Parallel routing: exactly one of the two nets runs on the watermarked
/// image, chosen fresh each call.
pub fn parallel(
    pair: &AttackPair,
    wm: &Array4<f64>,
    cfg: &EnsembleConfig,
    rng: &mut impl Rng,
) -> (Array4<f64>, EnsembleTrace) {
    let route = draw_route(cfg.r_w, rng);
    let (out, cache) = pair.net(route).forward(wm);
    (
        out,
        EnsembleTrace {
            mode: EnsembleMode::Parallel,
            wm_route: Some(route),
            cover_route: None,
            beta: None,
            caches: EnsembleCaches::Parallel { cache },
        },
    )
}

/// Blend kernel shared by both blend strategies:
/// `beta * adv_wm + (1 - beta) * adv_cover`.
pub fn blend_images(adv_wm: &Array4<f64>, adv_cover: &Array4<f64>, beta: f64) -> Array4<f64> {
    adv_wm * beta + adv_cover * (1.0 - beta)
}

/// Complementary routing of cover and watermarked images through the two
/// nets, blended with a uniform factor drawn per call.
pub fn random_blend(
    pair: &AttackPair,
    cover: &Array4<f64>,
    wm: &Array4<f64>,
    cfg: &EnsembleConfig,
    rng: &mut impl Rng,
) -> Result<(Array4<f64>, EnsembleTrace)> {
    if cover.dim() != wm.dim() {
        return Err(Error::config("cover and watermarked shapes differ"));
    }
    let (wm_route, cover_route) = match cfg.primary_draw {
        PrimaryDraw::Watermarked => {
            let r = draw_route(cfg.r_w, rng);
            (r, r.other())
        }
        PrimaryDraw::Cover => {
            let r = draw_route(cfg.r_co, rng);
            (r.other(), r)
        }
    };
    let beta: f64 = rng.gen();
    let (adv_wm, wm_cache) = pair.net(wm_route).forward(wm);
    let (adv_cover, cover_cache) = pair.net(cover_route).forward(cover);
    let out = blend_images(&adv_wm, &adv_cover, beta);
    Ok((
        out,
        EnsembleTrace {
            mode: EnsembleMode::RandomBlend,
            wm_route: Some(wm_route),
            cover_route: Some(cover_route),
            beta: Some(beta),
            caches: EnsembleCaches::Blend {
                wm_cache,
                cover_cache,
            },
        },
    ))
}

/// Both images pass through both nets; one output per image is picked
/// uniformly and the pair is blended.
pub fn aggregate_blend(
    pair: &AttackPair,
    cover: &Array4<f64>,
    wm: &Array4<f64>,
    cfg: &EnsembleConfig,
    rng: &mut impl Rng,
) -> Result<(Array4<f64>, EnsembleTrace)> {
    if cover.dim() != wm.dim() {
        return Err(Error::config("cover and watermarked shapes differ"));
    }
    let _ = cfg;
    let wm_route = if rng.gen::<bool>() { Route::Cnn } else { Route::DctTransformer };
    let cover_route = if rng.gen::<bool>() { Route::Cnn } else { Route::DctTransformer };
    let beta: f64 = rng.gen();
    // all four combinations are computed; only the picked pair keeps caches
    let (adv_wm, wm_cache) = pair.net(wm_route).forward(wm);
    let (_alt_wm, _) = pair.net(wm_route.other()).forward(wm);
    let (adv_cover, cover_cache) = pair.net(cover_route).forward(cover);
    let (_alt_cover, _) = pair.net(cover_route.other()).forward(cover);
    let out = blend_images(&adv_wm, &adv_cover, beta);
    Ok((
        out,
        EnsembleTrace {
            mode: EnsembleMode::AggregateBlend,
            wm_route: Some(wm_route),
            cover_route: Some(cover_route),
            beta: Some(beta),
            caches: EnsembleCaches::Blend {
                wm_cache,
                cover_cache,
            },
        },
    ))
}

/// Backpropagates an ensemble output gradient to the watermarked image,
/// accumulating attack parameter grads. Gradients into the cover branch are
/// computed (training the nets) but the cover itself is a constant input.
pub fn ensemble_backward(
    pair: &mut AttackPair,
    trace: &EnsembleTrace,
    gy: &Array4<f64>,
) -> Array4<f64> {
    match &trace.caches {
        EnsembleCaches::Cascade { dct, cnn } => {
            let gmid = pair.cnn.backward(cnn, gy);
            pair.dct_transformer.backward(dct, &gmid)
        }
        EnsembleCaches::Parallel { cache } => {
            let route = trace.wm_route.expect("parallel trace has route");
            pair.net_mut(route).backward(cache, gy)
        }
        EnsembleCaches::Blend { wm_cache, cover_cache } => {
            let beta = trace.beta.expect("blend trace has beta");
            let gwm_out = gy.mapv(|g| g * beta);
            let gcover_out = gy.mapv(|g| g * (1.0 - beta));
            let wm_route = trace.wm_route.expect("trace has wm route");
            let cover_route = trace.cover_route.expect("trace has cover route");
            let gwm = pair.net_mut(wm_route).backward(wm_cache, &gwm_out);
            let _ = pair.net_mut(cover_route).backward(cover_cache, &gcover_out);
            gwm
        }
    }
}

/// Runs the configured ensemble (or a single net wrapped as a pair) on one
/// batch. `cover` is only consumed by the blend modes.
pub fn ensemble_forward(
    pair: &AttackPair,
    cover: &Array4<f64>,
    wm: &Array4<f64>,
    cfg: &EnsembleConfig,
    rng: &mut impl Rng,
) -> Result<(Array4<f64>, EnsembleTrace)> {
    match cfg.mode {
        EnsembleMode::Cascade => Ok(cascade(pair, wm)),
        EnsembleMode::Parallel => Ok(parallel(pair, wm, cfg, rng)),
        EnsembleMode::RandomBlend => random_blend(pair, cover, wm, cfg, rng),
        EnsembleMode::AggregateBlend => aggregate_blend(pair, cover, wm, cfg, rng),
    }
}

/// The random choices one ensemble forward made, for replaying the same
/// configuration against updated weights.
#[derive(Debug, Clone, Copy)]
pub struct RoutingDecision {
    pub mode: EnsembleMode,
    pub wm_route: Option<Route>,
    pub cover_route: Option<Route>,
    pub beta: Option<f64>,
}

impl EnsembleTrace {
    pub fn decision(&self) -> RoutingDecision {
        RoutingDecision {
            mode: self.mode,
            wm_route: self.wm_route,
            cover_route: self.cover_route,
            beta: self.beta,
        }
    }
}

/// Re-runs an ensemble forward along previously drawn routes.
pub fn ensemble_replay(
    pair: &AttackPair,
    cover: &Array4<f64>,
    wm: &Array4<f64>,
    decision: &RoutingDecision,
) -> (Array4<f64>, EnsembleTrace) {
    match decision.mode {
        EnsembleMode::Cascade => cascade(pair, wm),
        EnsembleMode::Parallel => {
            let route = decision.wm_route.expect("parallel decision has route");
            let (out, cache) = pair.net(route).forward(wm);
            (
                out,
                EnsembleTrace {
                    mode: EnsembleMode::Parallel,
                    wm_route: Some(route),
                    cover_route: None,
                    beta: None,
                    caches: EnsembleCaches::Parallel { cache },
                },
            )
        }
        EnsembleMode::RandomBlend | EnsembleMode::AggregateBlend => {
            let wm_route = decision.wm_route.expect("blend decision has wm route");
            let cover_route = decision.cover_route.expect("blend decision has cover route");
            let beta = decision.beta.expect("blend decision has beta");
            let (adv_wm, wm_cache) = pair.net(wm_route).forward(wm);
            let (adv_cover, cover_cache) = pair.net(cover_route).forward(cover);
            let out = blend_images(&adv_wm, &adv_cover, beta);
            (
                out,
                EnsembleTrace {
                    mode: decision.mode,
                    wm_route: Some(wm_route),
                    cover_route: Some(cover_route),
                    beta: Some(beta),
                    caches: EnsembleCaches::Blend {
                        wm_cache,
                        cover_cache,
                    },
                },
            )
        }
    }
}

/// Which nets an ensemble trace sent gradients into.
pub fn touched_routes(trace: &EnsembleTrace) -> (bool, bool) {
    match trace.mode {
        EnsembleMode::Cascade => (true, true),
        EnsembleMode::Parallel => match trace.wm_route {
            Some(Route::Cnn) => (true, false),
            Some(Route::DctTransformer) => (false, true),
            None => (false, false),
        },
        EnsembleMode::RandomBlend | EnsembleMode::AggregateBlend => {
            let mut cnn = false;
            let mut dct = false;
            for r in [trace.wm_route, trace.cover_route].into_iter().flatten() {
                match r {
                    Route::Cnn => cnn = true,
                    Route::DctTransformer => dct = true,
                }
            }
            (cnn, dct)
        }
    }
}
