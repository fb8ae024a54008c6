//! End-to-end zero-shot segmentation of one image.
//!
//! preprocess → extract → classify → components → prompts → refine → restore

use image::RgbImage;
use serde::Serialize;

use crate::encoder::{extract, read_grid, CachedGrids, Encoder, FeatureCache};
use crate::error::{Result, Stage, StageExt};
use crate::maskops::{
    boxes, coarse_mask, components, single_box, BoxPrompt, CoarseMask, Component, Connectivity,
    DEFAULT_MASK_LOGIT,
};
use crate::pca::{self, classify, FitOptions, OrientationStats, PcaModel, TokenMask};
use crate::preprocess::{apply_geometry, plan_geometry, restore_mask, GeometrySpec};
use crate::raster::Mask;
use crate::refiner::{refine, MaskInput, Refiner};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SegmentOptions {
    /// Score at or above which a token is plant.
    pub threshold: f64,
    pub connectivity: Connectivity,
    pub min_tokens: usize,
    /// Attach the coarse 256x256 mask to every box prompt.
    pub use_mask_input: bool,
    /// One box around all components instead of one per component.
    pub single_box: bool,
    pub mask_logit: f32,
    /// Keep every intermediate representation in the result.
    pub keep_intermediates: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            connectivity: Connectivity::Eight,
            min_tokens: 1,
            use_mask_input: false,
            single_box: false,
            mask_logit: DEFAULT_MASK_LOGIT,
            keep_intermediates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Intermediates {
    pub token_mask: TokenMask,
    pub components: Vec<Component>,
    pub coarse: CoarseMask,
    /// Union of refiner outputs at padded resolution.
    pub refined: Mask,
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    /// Final mask at the original image resolution.
    pub mask: Mask,
    pub spec: GeometrySpec,
    pub prompts: Vec<BoxPrompt>,
    pub intermediates: Option<Intermediates>,
}

/// Segments `image` with a fitted, oriented `model`. Errors carry the stage
/// they came from.
pub fn segment_image(
    image: &RgbImage,
    model: &PcaModel,
    encoder: &mut dyn Encoder,
    refiner: &mut dyn Refiner,
    cache: Option<&FeatureCache>,
    options: &SegmentOptions,
) -> Result<SegmentationResult> {
    let spec = plan_geometry(image.height() as usize, image.width() as usize).stage(Stage::Preprocess)?;
    let padded = apply_geometry(image, &spec).stage(Stage::Preprocess)?;

    let grid = match cache {
        Some(c) => c.get_or_compute(encoder, &padded, &spec),
        None => extract(encoder, &padded, &spec),
    }
    .stage(Stage::Extract)?;

    let token_mask = classify(&grid, model, options.threshold).stage(Stage::Classify)?;
    let comps = components(&token_mask.values, options.connectivity, options.min_tokens);

    let prompts = if options.single_box {
        single_box(&comps, &spec).map(|b| b.into_iter().collect())
    } else {
        boxes(&comps, &spec)
    }
    .stage(Stage::Prompts)?;
    let coarse = coarse_mask(&token_mask.values, &spec).stage(Stage::Prompts)?;

    let mask_input = options.use_mask_input.then_some(MaskInput {
        coarse: &coarse,
        logit: options.mask_logit,
    });
    let refined = refine(refiner, &padded, &prompts, mask_input).stage(Stage::Refine)?;
    let mask = restore_mask(&refined, &spec).stage(Stage::Restore)?;

    let intermediates = options.keep_intermediates.then(|| Intermediates {
        token_mask,
        components: comps,
        coarse,
        refined,
    });
    Ok(SegmentationResult {
        mask,
        spec,
        prompts,
        intermediates,
    })
}

/// Fits and orients a model on `count` images produced by `image_at`.
///
/// With a cache the grids are written to disk and streamed back, so memory
/// stays bounded by one grid; images are then read twice. Without one every
/// grid is held in memory.
pub fn fit_model(
    encoder: &mut dyn Encoder,
    count: usize,
    image_at: &dyn Fn(usize) -> Result<RgbImage>,
    cache: Option<&FeatureCache>,
    options: &FitOptions,
    flip: bool,
) -> Result<PcaModel> {
    let padded_at = |i: usize| -> Result<RgbImage> {
        let image = image_at(i)?;
        let spec = plan_geometry(image.height() as usize, image.width() as usize)?;
        apply_geometry(&image, &spec)
    };
    let spec_of = |img: &RgbImage| plan_geometry(img.height() as usize, img.width() as usize);
    match cache {
        Some(cache) => {
            let mut source = CachedGrids::default();
            for i in 0..count {
                let image = image_at(i)?;
                let spec = spec_of(&image)?;
                let padded = apply_geometry(&image, &spec)?;
                source.paths.push(cache.ensure(encoder, &padded, &spec).stage(Stage::Extract)?);
            }
            let model = pca::fit_source(&source, options)?;
            let mut stats = OrientationStats::new();
            for (i, path) in source.paths.iter().enumerate() {
                stats.add(&model, &read_grid(path)?, &padded_at(i)?)?;
            }
            Ok(stats.orient(&model, flip))
        }
        None => {
            let mut grids = Vec::with_capacity(count);
            let mut images = Vec::with_capacity(count);
            for i in 0..count {
                let image = image_at(i)?;
                let spec = spec_of(&image)?;
                let padded = apply_geometry(&image, &spec)?;
                grids.push(extract(encoder, &padded, &spec).stage(Stage::Extract)?);
                images.push(padded);
            }
            let model = pca::fit(&grids, options)?;
            pca::orient(&model, &grids, &images, flip)
        }
    }
}
