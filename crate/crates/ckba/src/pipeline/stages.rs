//! The experiment stages behind the CLI.
//!
//! Stage order: `synth` draws the reference field and all observation data;
//! `eigs` builds the unconditional KLE and one CKLE per direct-data count;
//! `ensemble` generates paired training/testing ensembles through the
//! forward solver; `train` fits the configured surrogate variants; `uq`
//! compares surrogate and Monte-Carlo observable PDFs; `invert` runs BA-MAP
//! and CKLEMAP estimates; `report` collects tables.
//!
//! Every stage validates its upstream artifacts through the run manifest,
//! writes its outputs atomically, and records checksums, wall-clock time,
//! and forward-query counts. All randomness flows through per-stage named
//! streams, so reruns are byte-identical.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{self, DatasetRole, EnsembleDataset, FitConfig, RidgeSurrogate};
use crate::darcy::{observe, solve_head, GridGeometry, HeadObservable, ObservationLayout};
use crate::error::{Error, Result};
use crate::gp::{GpModel, MeanFunction, Point};
use crate::inverse::{
    solve_map, FieldData, InverseProblemSpec, InversionResult, Predictor, Regularizer,
    SolveOptions,
};
use crate::kle::{eigensolve, sample_coeffs, BasisKind, FieldBasis};
use crate::uq::{kde, kl_divergence, rmse_rows, row_variances};

use super::config::{basis_tag, ExperimentConfig, VariantSpec};
use super::iomatrix::{read_matrix, write_matrix};
use super::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Eigs,
    Ensemble,
    Train,
    Uq,
    Invert,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Eigs => "eigs",
            Stage::Ensemble => "ensemble",
            Stage::Train => "train",
            Stage::Uq => "uq",
            Stage::Invert => "invert",
            Stage::Report => "report",
        }
    }

    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Eigs,
        Stage::Ensemble,
        Stage::Train,
        Stage::Uq,
        Stage::Invert,
        Stage::Report,
    ];
}

/// Runs one stage against the run directory `out`.
pub fn run_stage(stage: Stage, config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let started = Instant::now();
    let mut manifest = match stage {
        // synth starts a fresh run
        Stage::Synth => RunManifest::new(config.hash()),
        _ => RunManifest::load(out, &config.hash(), stage.name())?,
    };
    match stage {
        Stage::Synth => stage_synth(config, out, &mut manifest)?,
        Stage::Eigs => stage_eigs(config, out, &mut manifest)?,
        Stage::Ensemble => stage_ensemble(config, out, &mut manifest)?,
        Stage::Train => stage_train(config, out, &mut manifest)?,
        Stage::Uq => stage_uq(config, out, &mut manifest)?,
        Stage::Invert => stage_invert(config, out, &mut manifest)?,
        Stage::Report => stage_report(config, out, &mut manifest)?,
    }
    manifest
        .wall_clock_seconds
        .insert(stage.name().to_string(), started.elapsed().as_secs_f64());
    manifest.save(out)
}

// ---------------------------------------------------------------------------
// shared fixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct FieldSiteSet {
    n_y: usize,
    cells: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthObservations {
    well_cells: Vec<usize>,
    head_obs: Vec<f64>,
    field_sites: Vec<FieldSiteSet>,
}

fn unconditional_gp(config: &ExperimentConfig) -> Result<GpModel> {
    Ok(GpModel::unconditional(
        MeanFunction::Constant(config.kernel.mean),
        config.kernel_spec()?,
    ))
}

/// Head observation wells on a jittered lattice, snapped to distinct cells.
fn well_layout(config: &ExperimentConfig, grid: &GridGeometry) -> Vec<usize> {
    let n_u = config.n_u;
    let aspect = (n_u as f64 * grid.lx / grid.ly).sqrt();
    let cols = (aspect.round() as usize).clamp(1, n_u);
    let rows = n_u.div_ceil(cols);
    let mut rng = crate::rng::stream(config.seed, "synth:wells");
    let mut cells = Vec::with_capacity(n_u);
    let mut taken = vec![false; grid.n_cells()];
    'outer: for r in 0..rows {
        for c in 0..cols {
            if cells.len() == n_u {
                break 'outer;
            }
            let jx: f64 = rng.random_range(-0.25..0.25);
            let jy: f64 = rng.random_range(-0.25..0.25);
            let x = (c as f64 + 0.5 + jx) / cols as f64 * grid.lx;
            let y = (r as f64 + 0.5 + jy) / rows as f64 * grid.ly;
            let ix = ((x / grid.dx()) as usize).min(grid.nx - 1);
            let iy = ((y / grid.dy()) as usize).min(grid.ny - 1);
            let mut cell = grid.index(ix, iy);
            // collisions walk forward to the next free cell
            while taken[cell] {
                cell = (cell + 1) % grid.n_cells();
            }
            taken[cell] = true;
            cells.push(cell);
        }
    }
    cells
}

/// Deterministic permutation of cells; nested site sets are its prefixes.
fn field_site_permutation(config: &ExperimentConfig, grid: &GridGeometry) -> Vec<usize> {
    let mut rng = crate::rng::stream(config.seed, "synth:field-sites");
    let mut cells: Vec<usize> = (0..grid.n_cells()).collect();
    for i in (1..cells.len()).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }
    cells
}

/// Greedy k-center subset of the wells, started from the well closest to the
/// domain centroid. Returns indices into the well list.
pub fn diagnostic_wells(grid: &GridGeometry, wells: &[usize], count: usize) -> Vec<usize> {
    assert!(count >= 1 && count <= wells.len());
    let pos: Vec<Point> = wells.iter().map(|&c| grid.center(c)).collect();
    let centroid = [grid.lx / 2.0, grid.ly / 2.0];
    let d2 = |a: Point, b: Point| {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        dx * dx + dy * dy
    };
    let first = (0..pos.len())
        .min_by(|&a, &b| d2(pos[a], centroid).total_cmp(&d2(pos[b], centroid)))
        .unwrap();
    let mut chosen = vec![first];
    while chosen.len() < count {
        let next = (0..pos.len())
            .filter(|i| !chosen.contains(i))
            .max_by(|&a, &b| {
                let da = chosen.iter().map(|&c| d2(pos[a], pos[c])).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|&c| d2(pos[b], pos[c])).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        chosen.push(next);
    }
    chosen
}

fn load_observations(out: &Path, manifest: &RunManifest, stage: &str) -> Result<SynthObservations> {
    let path = manifest.require(out, "synth/observations", stage)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn load_reference(out: &Path, manifest: &RunManifest, stage: &str) -> Result<DVector<f64>> {
    let path = manifest.require(out, "synth/y_ref", stage)?;
    Ok(read_matrix(&path)?.column(0).into_owned())
}

fn load_basis(
    out: &Path,
    manifest: &RunManifest,
    config: &ExperimentConfig,
    tag: &str,
    stage: &str,
) -> Result<FieldBasis> {
    let dir = manifest.require(out, &format!("eigs/{tag}"), stage)?;
    FieldBasis::load(&dir, Some(&config.grid_hash()))
}

fn load_dataset(
    out: &Path,
    manifest: &RunManifest,
    tag: &str,
    role: &str,
    stage: &str,
) -> Result<EnsembleDataset> {
    let dir = manifest.require(out, &format!("ensemble/{tag}-{role}"), stage)?;
    EnsembleDataset::load(&dir)
}

fn load_surrogate(
    out: &Path,
    manifest: &RunManifest,
    tag: &str,
    variant: VariantSpec,
    stage: &str,
) -> Result<RidgeSurrogate> {
    let dir = manifest.require(out, &format!("train/{tag}-{}", variant.label()), stage)?;
    RidgeSurrogate::load(&dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.10e}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Conditional tags in config order, preceded by the unconditional one.
fn all_basis_tags(config: &ExperimentConfig) -> Vec<(String, Option<usize>)> {
    let mut tags = vec![(basis_tag(None), None)];
    for &n_y in &config.n_y_list {
        tags.push((basis_tag(Some(n_y)), Some(n_y)));
    }
    tags
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn stage_synth(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let bvp = config.bvp_spec()?;
    let gp = unconditional_gp(config)?;
    let centers = grid.centers();

    // reference field: one fixed-seed full-rank draw from the prior
    let cov = gp.cov_matrix(&centers)?;
    let pairs = eigensolve(&cov, &grid.cell_areas(), grid.n_cells())?;
    let full_basis = FieldBasis::new(
        BasisKind::Unconditional,
        gp.mean_vector(&centers),
        pairs,
        grid.cell_areas(),
    );
    let mut rng = crate::rng::stream(config.seed, "synth:reference");
    let z = sample_coeffs(&mut rng, 1, grid.n_cells()).column(0).into_owned();
    let y_ref = full_basis.expand(&z)?;

    // head observations at the wells
    let well_cells = well_layout(config, &grid);
    let layout = ObservationLayout {
        head_cells: well_cells.clone(),
        field_cells: vec![],
    };
    layout.validate(&grid)?;
    let u_ref = solve_head(&grid, &bvp, &y_ref)?;
    let mut head_obs = observe(&u_ref, &layout);
    let mut noise_rng = crate::rng::stream(config.seed, "synth:head-noise");
    for v in head_obs.iter_mut() {
        *v += config.sigma_u * noise_rng.sample::<f64, _>(StandardNormal);
    }

    // direct field observations: nested prefixes of one permutation, or
    // independent permutations per count
    let mut site_sets = Vec::new();
    let max_n_y = *config.n_y_list.iter().max().unwrap();
    if config.nested_observations {
        let permutation = field_site_permutation(config, &grid);
        let mut site_noise = crate::rng::stream(config.seed, "synth:field-noise");
        let noise: Vec<f64> = (0..max_n_y)
            .map(|_| config.sigma_y * site_noise.sample::<f64, _>(StandardNormal))
            .collect();
        for &n_y in &config.n_y_list {
            let cells: Vec<usize> = permutation[..n_y].to_vec();
            let values: Vec<f64> = cells
                .iter()
                .enumerate()
                .map(|(i, &c)| y_ref[c] + noise[i])
                .collect();
            site_sets.push(FieldSiteSet { n_y, cells, values });
        }
    } else {
        for &n_y in &config.n_y_list {
            let mut rng =
                crate::rng::stream(config.seed, &format!("synth:field-sites:{n_y}"));
            let mut cells: Vec<usize> = (0..grid.n_cells()).collect();
            for i in (1..cells.len()).rev() {
                let j = rng.random_range(0..=i);
                cells.swap(i, j);
            }
            cells.truncate(n_y);
            let values: Vec<f64> = cells
                .iter()
                .map(|&c| y_ref[c] + config.sigma_y * rng.sample::<f64, _>(StandardNormal))
                .collect();
            site_sets.push(FieldSiteSet { n_y, cells, values });
        }
    }

    write_matrix(
        &out.join("synth/y_ref.ckba"),
        &DMatrix::from_column_slice(y_ref.len(), 1, y_ref.as_slice()),
    )?;
    write_json(
        &out.join("synth/observations.json"),
        &SynthObservations {
            well_cells,
            head_obs: head_obs.iter().copied().collect(),
            field_sites: site_sets,
        },
    )?;
    manifest.record(out, "synth/y_ref", "synth/y_ref.ckba", "synth")?;
    manifest.record(out, "synth/observations", "synth/observations.json", "synth")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eigs
// ---------------------------------------------------------------------------

fn stage_eigs(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let gp = unconditional_gp(config)?;
    let centers = grid.centers();
    let weights = grid.cell_areas();
    let observations = load_observations(out, manifest, "eigs")?;
    let grid_hash = config.grid_hash();

    let cov = gp.cov_matrix(&centers)?;
    let pairs = eigensolve(&cov, &weights, config.n_xi)?;
    let basis = FieldBasis::new(
        BasisKind::Unconditional,
        gp.mean_vector(&centers),
        pairs,
        weights.clone(),
    );
    let tag = basis_tag(None);
    basis.save(&out.join(format!("eigs/{tag}")), &grid_hash)?;
    manifest.record(out, &format!("eigs/{tag}"), &format!("eigs/{tag}"), "eigs")?;

    for sites in &observations.field_sites {
        let locations: Vec<Point> = sites.cells.iter().map(|&c| grid.center(c)).collect();
        let values = DVector::from_vec(sites.values.clone());
        let conditioned = gp.condition(
            &locations,
            &values,
            config.sigma_y * config.sigma_y,
        )?;
        let cov_c = conditioned.cov_matrix(&centers)?;
        let pairs_c = eigensolve(&cov_c, &weights, config.n_xi)?;
        let basis_c = FieldBasis::new(
            BasisKind::Conditional,
            conditioned.mean_vector(&centers),
            pairs_c,
            weights.clone(),
        );
        let tag = basis_tag(Some(sites.n_y));
        basis_c.save(&out.join(format!("eigs/{tag}")), &grid_hash)?;
        manifest.record(out, &format!("eigs/{tag}"), &format!("eigs/{tag}"), "eigs")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble
// ---------------------------------------------------------------------------

fn stage_ensemble(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let bvp = config.bvp_spec()?;
    let observations = load_observations(out, manifest, "ensemble")?;
    let layout = ObservationLayout {
        head_cells: observations.well_cells.clone(),
        field_cells: vec![],
    };

    for (tag, _) in all_basis_tags(config) {
        let basis = load_basis(out, manifest, config, &tag, "ensemble")?;
        let observable = HeadObservable::new(&grid, &bvp, &basis, &layout)?;
        for (role, role_name, q) in [
            (DatasetRole::Train, "train", config.q_train),
            (DatasetRole::Test, "test", config.q_test),
        ] {
            let seed_tag = format!("ensemble:{tag}:{role_name}");
            let mut rng = crate::rng::stream(config.seed, &seed_tag);
            let xi = sample_coeffs(&mut rng, q, config.n_xi);
            let columns: Vec<DVector<f64>> = (0..q)
                .into_par_iter()
                .map(|j| observable.eval(&xi.column(j).into_owned()))
                .collect::<Result<Vec<_>>>()?;
            let mut u = DMatrix::zeros(config.n_u, q);
            for (j, col) in columns.into_iter().enumerate() {
                u.set_column(j, &col);
            }
            let dataset = EnsembleDataset::new(xi, u, seed_tag.clone(), role)?;
            let rel = format!("ensemble/{tag}-{role_name}");
            dataset.save(&out.join(&rel))?;
            manifest.record(out, &rel, &rel, "ensemble")?;
            manifest.query_counts.insert(seed_tag, q as u64);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn stage_train(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let bvp = config.bvp_spec()?;
    let observations = load_observations(out, manifest, "train")?;
    let layout = ObservationLayout {
        head_cells: observations.well_cells.clone(),
        field_cells: vec![],
    };

    for (tag, _) in all_basis_tags(config) {
        let basis = load_basis(out, manifest, config, &tag, "train")?;
        let dataset = load_dataset(out, manifest, &tag, "train", "train")?;
        let observable = HeadObservable::new(&grid, &bvp, &basis, &layout)?;
        for &variant in &config.ba.variants {
            let (k, kind) = variant.shape();
            let fit_config = FitConfig {
                degree: config.ba.degree,
                level: config.ba.level,
                tau: config.ba.tau,
                penalize_bias: config.ba.penalize_bias,
            };
            let surrogate = ba::fit(&observable, &dataset, k, kind, &fit_config)?;
            let rel = format!("train/{tag}-{}", variant.label());
            surrogate.save(&out.join(&rel))?;
            manifest.record(out, &rel, &rel, "train")?;
            manifest.query_counts.insert(
                format!("train:{tag}:{}:quadrature", variant.label()),
                surrogate.quad_queries(),
            );
            // the surrogate's true data cost: training ensemble + preimages
            manifest.query_counts.insert(
                format!("surrogate-cost:{tag}:{}", variant.label()),
                config.q_train as u64 + surrogate.quad_queries(),
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// uq
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct UqDiagnostics {
    /// Indices into the well list, k-center spread over the domain.
    diagnostic_wells: Vec<usize>,
    /// Grid cells of those wells.
    cells: Vec<usize>,
}

fn stage_uq(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let observations = load_observations(out, manifest, "uq")?;
    let wells = diagnostic_wells(
        &grid,
        &observations.well_cells,
        config.uq.diagnostic_wells,
    );
    write_json(
        &out.join("uq/diagnostics.json"),
        &UqDiagnostics {
            diagnostic_wells: wells.clone(),
            cells: wells.iter().map(|&w| observations.well_cells[w]).collect(),
        },
    )?;

    let mut kl_rows: Vec<Vec<String>> = Vec::new();
    let mut var_rows: Vec<Vec<String>> = Vec::new();
    for (tag, n_y) in all_basis_tags(config) {
        let test = load_dataset(out, manifest, &tag, "test", "uq")?;
        let variances = row_variances(&test.u);
        var_rows.push(
            std::iter::once(tag.clone())
                .chain(std::iter::once(
                    n_y.map_or("0".to_string(), |n| n.to_string()),
                ))
                .chain(variances.iter().map(|&v| fmt_float(v)))
                .collect(),
        );
        for &variant in &config.ba.variants {
            let surrogate = load_surrogate(out, manifest, &tag, variant, "uq")?;
            let predictions = surrogate.predict(&test.xi);
            let mut row = vec![
                tag.clone(),
                n_y.map_or("0".to_string(), |n| n.to_string()),
                variant.label().to_string(),
            ];
            for (rank, &w) in wells.iter().enumerate() {
                let mc: Vec<f64> = test.u.row(w).iter().copied().collect();
                let ba_samples: Vec<f64> = predictions.row(w).iter().copied().collect();
                let p_mc = kde(&mc)?;
                let p_ba = kde(&ba_samples)?;
                // KL(surrogate || Monte Carlo)
                let kl = kl_divergence(&p_ba, &p_mc);
                row.push(fmt_float(kl));

                let mut pdf_rows = Vec::with_capacity(p_mc.grid.len());
                for i in 0..p_mc.grid.len() {
                    pdf_rows.push(vec![
                        fmt_float(p_mc.grid[i]),
                        fmt_float(p_mc.density[i]),
                        fmt_float(p_ba.grid[i]),
                        fmt_float(p_ba.density[i]),
                    ]);
                }
                write_csv(
                    &out.join(format!(
                        "uq/pdf/{tag}-{}-well{rank}.csv",
                        variant.label()
                    )),
                    "x_mc,pdf_mc,x_ba,pdf_ba",
                    &pdf_rows,
                )?;
            }
            kl_rows.push(row);
        }
    }
    let kl_header = {
        let mut h = String::from("basis,n_y,variant");
        for rank in 0..config.uq.diagnostic_wells {
            h.push_str(&format!(",kl_well{rank}"));
        }
        h
    };
    write_csv(&out.join("uq/kl.csv"), &kl_header, &kl_rows)?;
    let var_header = {
        let mut h = String::from("basis,n_y");
        for w in 0..config.n_u {
            h.push_str(&format!(",var_well{w}"));
        }
        h
    };
    write_csv(&out.join("uq/variance.csv"), &var_header, &var_rows)?;

    manifest.record(out, "uq/diagnostics", "uq/diagnostics.json", "uq")?;
    manifest.record(out, "uq/kl", "uq/kl.csv", "uq")?;
    manifest.record(out, "uq/variance", "uq/variance.csv", "uq")?;
    manifest.record(out, "uq/pdf", "uq/pdf", "uq")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// invert
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct InversionRecord {
    pub method: String,
    pub n_y: usize,
    pub iterations: u64,
    pub objective: f64,
    pub converged: bool,
    pub rel_l2: f64,
    pub linf: f64,
}

fn record_inversion(
    out: &Path,
    manifest: &mut RunManifest,
    grid: &GridGeometry,
    method: &str,
    n_y: usize,
    result: &InversionResult,
    y_ref: &DVector<f64>,
) -> Result<()> {
    let name = format!("{method}-ny{n_y}");
    let record = InversionRecord {
        method: method.to_string(),
        n_y,
        iterations: result.iterations,
        objective: result.objective,
        converged: result.converged,
        rel_l2: result.rel_l2.unwrap_or(f64::NAN),
        linf: result.linf.unwrap_or(f64::NAN),
    };
    write_json(&out.join(format!("invert/{name}.json")), &record)?;
    write_matrix(
        &out.join(format!("invert/{name}-field.ckba")),
        &DMatrix::from_column_slice(result.field.len(), 1, result.field.as_slice()),
    )?;
    // point-error map: ny rows by nx columns of |estimate - reference|
    let mut rows = Vec::with_capacity(grid.ny);
    for j in 0..grid.ny {
        rows.push(
            (0..grid.nx)
                .map(|i| fmt_float((result.field[grid.index(i, j)] - y_ref[grid.index(i, j)]).abs()))
                .collect(),
        );
    }
    let header = (0..grid.nx).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    write_csv(&out.join(format!("invert/{name}-pointerr.csv")), &header, &rows)?;

    manifest.record(out, &format!("invert/{name}"), &format!("invert/{name}.json"), "invert")?;
    manifest.record(
        out,
        &format!("invert/{name}-field"),
        &format!("invert/{name}-field.ckba"),
        "invert",
    )?;
    manifest.record(
        out,
        &format!("invert/{name}-pointerr"),
        &format!("invert/{name}-pointerr.csv"),
        "invert",
    )?;
    Ok(())
}

fn stage_invert(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let grid = config.grid_geometry()?;
    let bvp = config.bvp_spec()?;
    let observations = load_observations(out, manifest, "invert")?;
    let y_ref = load_reference(out, manifest, "invert")?;
    let layout = ObservationLayout {
        head_cells: observations.well_cells.clone(),
        field_cells: vec![],
    };
    let u_obs = DVector::from_vec(observations.head_obs.clone());
    let solve_opts = SolveOptions {
        grad_tol: config.inversion.grad_tol,
        max_iters: config.inversion.max_iters,
    };
    let x0 = DVector::zeros(config.n_xi);

    let uncond_tag = basis_tag(None);
    let uncond_basis = load_basis(out, manifest, config, &uncond_tag, "invert")?;
    let uncond_surrogates: Vec<(VariantSpec, RidgeSurrogate)> = config
        .inversion
        .variants
        .iter()
        .map(|&v| Ok((v, load_surrogate(out, manifest, &uncond_tag, v, "invert")?)))
        .collect::<Result<Vec<_>>>()?;

    for sites in &observations.field_sites {
        let n_y = sites.n_y;
        let tag = basis_tag(Some(n_y));
        let cond_basis = load_basis(out, manifest, config, &tag, "invert")?;

        // CKLEMAP: conditional basis, full forward solver, no direct-data term
        let spec_cond = InverseProblemSpec {
            u_obs: u_obs.clone(),
            sigma_u: config.inversion.sigma_u,
            gamma: config.inversion.gamma_conditional,
            regularizer: Regularizer::SquaredL2,
            field_data: None,
        };
        let observable = HeadObservable::new(&grid, &bvp, &cond_basis, &layout)?;
        let result = solve_map(
            &spec_cond,
            &Predictor::FullSolver(&observable),
            &cond_basis,
            &x0,
            &solve_opts,
            Some(&y_ref),
        )?;
        record_inversion(out, manifest, &grid, "cklemap", n_y, &result, &y_ref)?;

        // BA-MAP on the conditional surrogates
        for &variant in &config.inversion.variants {
            let surrogate = load_surrogate(out, manifest, &tag, variant, "invert")?;
            let result = solve_map(
                &spec_cond,
                &Predictor::Surrogate(&surrogate),
                &cond_basis,
                &x0,
                &solve_opts,
                Some(&y_ref),
            )?;
            record_inversion(
                out,
                manifest,
                &grid,
                &format!("bamap-cond-{}", variant.label()),
                n_y,
                &result,
                &y_ref,
            )?;
        }

        // BA-MAP on the unconditional surrogates: direct data enters the
        // misfit explicitly
        let spec_uncond = InverseProblemSpec {
            u_obs: u_obs.clone(),
            sigma_u: config.inversion.sigma_u,
            gamma: config.inversion.gamma_unconditional,
            regularizer: Regularizer::SquaredL2,
            field_data: Some(FieldData {
                cells: sites.cells.clone(),
                values: DVector::from_vec(sites.values.clone()),
                sigma_y: config.inversion.sigma_y,
            }),
        };
        for (variant, surrogate) in &uncond_surrogates {
            let result = solve_map(
                &spec_uncond,
                &Predictor::Surrogate(surrogate),
                &uncond_basis,
                &x0,
                &solve_opts,
                Some(&y_ref),
            )?;
            record_inversion(
                out,
                manifest,
                &grid,
                &format!("bamap-uncond-{}", variant.label()),
                n_y,
                &result,
                &y_ref,
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn stage_report(config: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    // RMSE tables over train and test ensembles, rows ordered by n_y
    for role in ["train", "test"] {
        let mut rows: Vec<Vec<String>> = Vec::new();
        for (tag, n_y) in all_basis_tags(config) {
            let dataset = load_dataset(out, manifest, &tag, role, "report")?;
            for &variant in &config.ba.variants {
                let surrogate = load_surrogate(out, manifest, &tag, variant, "report")?;
                let predictions = surrogate.predict(&dataset.xi);
                let rmse = rmse_rows(&predictions, &dataset.u);
                let mean = rmse.iter().sum::<f64>() / rmse.len() as f64;
                rows.push(
                    vec![
                        tag.clone(),
                        n_y.map_or("0".to_string(), |n| n.to_string()),
                        variant.label().to_string(),
                    ]
                    .into_iter()
                    .chain(rmse.iter().map(|&r| fmt_float(r)))
                    .chain(std::iter::once(fmt_float(mean)))
                    .collect(),
                );
            }
        }
        let header = {
            let mut h = String::from("basis,n_y,variant");
            for w in 0..config.n_u {
                h.push_str(&format!(",rmse_well{w}"));
            }
            h.push_str(",rmse_mean");
            h
        };
        let rel = format!("report/rmse_{role}.csv");
        write_csv(&out.join(&rel), &header, &rows)?;
        manifest.record(out, &rel, &rel, "report")?;
    }

    // inversion summary ordered by n_y, then method
    let mut inv_rows: Vec<Vec<String>> = Vec::new();
    let mut methods = vec!["cklemap".to_string()];
    for &v in &config.inversion.variants {
        methods.push(format!("bamap-cond-{}", v.label()));
    }
    for &v in &config.inversion.variants {
        methods.push(format!("bamap-uncond-{}", v.label()));
    }
    for &n_y in &config.n_y_list {
        for method in &methods {
            let path = manifest.require(out, &format!("invert/{method}-ny{n_y}"), "report")?;
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: InversionRecord =
                serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
            inv_rows.push(vec![
                record.method,
                record.n_y.to_string(),
                record.iterations.to_string(),
                fmt_float(record.objective),
                record.converged.to_string(),
                fmt_float(record.rel_l2),
                fmt_float(record.linf),
            ]);
        }
    }
    write_csv(
        &out.join("report/inversion.csv"),
        "method,n_y,iterations,objective,converged,rel_l2,linf",
        &inv_rows,
    )?;
    manifest.record(out, "report/inversion.csv", "report/inversion.csv", "report")?;

    // KL table and PDF curves come straight from the uq stage
    let kl_src = manifest.require(out, "uq/kl", "report")?;
    let kl_dst = out.join("report/kl.csv");
    fs::copy(&kl_src, &kl_dst).map_err(|e| Error::io(&kl_dst, e))?;
    manifest.record(out, "report/kl.csv", "report/kl.csv", "report")?;

    let pdf_src = manifest.require(out, "uq/pdf", "report")?;
    let pdf_dst = out.join("report/pdf");
    if pdf_dst.exists() {
        fs::remove_dir_all(&pdf_dst).map_err(|e| Error::io(&pdf_dst, e))?;
    }
    fs::create_dir_all(&pdf_dst).map_err(|e| Error::io(&pdf_dst, e))?;
    for entry in fs::read_dir(&pdf_src).map_err(|e| Error::io(&pdf_src, e))? {
        let entry = entry.map_err(|e| Error::io(&pdf_src, e))?;
        let dst = pdf_dst.join(entry.file_name());
        fs::copy(entry.path(), &dst).map_err(|e| Error::io(&dst, e))?;
    }
    manifest.record(out, "report/pdf", "report/pdf", "report")?;

    // forward-query accounting from the manifest
    let query_rows: Vec<Vec<String>> = manifest
        .query_counts
        .iter()
        .map(|(k, v)| vec![k.clone(), v.to_string()])
        .collect();
    write_csv(&out.join("report/queries.csv"), "key,count", &query_rows)?;
    manifest.record(out, "report/queries.csv", "report/queries.csv", "report")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// helpers for tests and the acceptance suite
// ---------------------------------------------------------------------------

/// Runs every stage in order.
pub fn run_all(config: &ExperimentConfig, out: &Path) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(stage, config, out)?;
    }
    Ok(())
}

/// Parses a report CSV into (header fields, rows of fields).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}
