use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use spackle_core::dataset::{
    generate_synthetic, load_dataset_with, load_provenance, save_dataset, save_provenance, Dataset,
    LoadOptions, SynthParams,
};
use spackle_core::model::{checkpoint_scalar, Checkpoint};
use spackle_core::neighborhoods::{SpotGraph, NUM_NEIGHBORS, TOKEN_RING};
use spackle_core::preprocess::{
    median_complete, normalize, select_genes, write_moran_tsv, CompletionProvenance, Source,
};
use spackle_core::training::{
    complete_dataset, corrupt, corruption_sweep, evaluate, lr_search, train, write_metrics_tsv,
    write_sweep_tsv, EvalOptions, MedianImputer, ModelImputer, SweepPoint,
};
use spackle_core::{Error, Scalar};

use crate::config::{apply, Precision, Settings};
use crate::{report, CliError, Command, Common, ModelArgs, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

pub(crate) fn run(command: Command) -> CliResult {
    match command {
        Command::Synth {
            slides,
            rows,
            cols,
            genes,
            dropout,
            smoothness,
            out,
            common,
        } => {
            let settings = resolve(&common)?;
            let d = generate_synthetic(&SynthParams {
                num_slides: slides,
                rows,
                cols,
                genes,
                dropout_rate: dropout,
                smoothness_length: smoothness,
                seed: settings.seed,
            })?;
            save_dataset(&d, &out)?;
            describe(&d);
            Ok(())
        }
        Command::Validate {
            data,
            zeros_are_missing,
        } => {
            let d = load(&data, zeros_are_missing)?;
            let provenance = load_provenance(&data, &d)?;
            describe(&d);
            if let Some(p) = provenance {
                for s in [
                    Source::MedianLocal,
                    Source::MedianSlide,
                    Source::MedianGlobal,
                    Source::Model,
                ] {
                    println!("{s}: {}", p.count(s));
                }
            }
            println!("ok");
            Ok(())
        }
        Command::Normalize {
            data,
            out,
            drop_empty_spots,
            zeros_are_missing,
        } => {
            let d = normalize(&load(&data, zeros_are_missing)?, drop_empty_spots)?;
            save_dataset(&d, &out)?;
            describe(&d);
            Ok(())
        }
        Command::SelectGenes {
            data,
            out,
            num_genes,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply(&mut settings.num_genes, num_genes);
            let (d, scores) = select_genes(&load(&data, false)?, settings.num_genes)?;
            save_dataset(&d, &out)?;
            write_with(&out.join("moran.tsv"), |f| write_moran_tsv(&scores, f))?;
            describe(&d);
            Ok(())
        }
        Command::MedianComplete {
            data,
            out,
            max_radius_hops,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply(&mut settings.max_radius_hops, max_radius_hops);
            let (d, p) = median_complete(&load(&data, false)?, settings.max_radius_hops)?;
            save_dataset(&d, &out)?;
            save_provenance(&p, &d, &out)?;
            describe(&d);
            for s in [
                Source::MedianLocal,
                Source::MedianSlide,
                Source::MedianGlobal,
            ] {
                println!("{s}: {}", p.count(s));
            }
            Ok(())
        }
        Command::Train {
            data,
            out,
            model,
            train,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply_model(&mut settings, &model);
            apply_train(&mut settings, &train);
            let (d, p) = load_completed(&data)?;
            let run_dir = create_run_dir(&out, &settings)?;
            match settings.precision {
                Precision::F32 => train_run::<f32>(&settings, &data, &d, &p, &run_dir)?,
                Precision::F64 => train_run::<f64>(&settings, &data, &d, &p, &run_dir)?,
            }
            println!("{}", run_dir.display());
            Ok(())
        }
        Command::LrSearch {
            data,
            out,
            grid,
            search_iterations,
            model,
            train,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply_model(&mut settings, &model);
            apply_train(&mut settings, &train);
            apply(&mut settings.lr_grid, grid);
            apply(&mut settings.search_iterations, search_iterations);
            let (d, p) = load_completed(&data)?;
            let run_dir = create_run_dir(&out, &settings)?;
            let mut base = settings.train_config();
            base.max_iterations = settings.search_iterations;
            let model_config = settings.model_config(d.num_genes());
            let search = match settings.precision {
                Precision::F32 => {
                    lr_search::<f32>(&d, &p, &model_config, &base, &settings.lr_grid)?
                }
                Precision::F64 => {
                    lr_search::<f64>(&d, &p, &model_config, &base, &settings.lr_grid)?
                }
            };
            write_with(&run_dir.join("lr_search.tsv"), |f| {
                writeln!(f, "learning_rate\tval_mse")?;
                for row in &search.rows {
                    match row.val_mse {
                        Some(v) => writeln!(f, "{}\t{v}", row.learning_rate)?,
                        None => writeln!(f, "{}\tdiverged", row.learning_rate)?,
                    }
                }
                Ok(())
            })?;
            let mut summary = header("Learning-rate search", &settings, &data);
            summary.push_str(&format!(
                "- iterations per candidate: {}\n- best learning rate: {}\n",
                settings.search_iterations, search.best_learning_rate
            ));
            write_text(&run_dir.join("summary.md"), &summary)?;
            println!("best learning rate: {}", search.best_learning_rate);
            println!("{}", run_dir.display());
            Ok(())
        }
        Command::Complete {
            data,
            checkpoint,
            out,
            common,
        } => {
            resolve(&common)?;
            let (d, p) = load_completed(&data)?;
            let (completed, provenance) = match scalar_of(&checkpoint)? {
                Precision::F32 => complete_with::<f32>(&checkpoint, &d, &p)?,
                Precision::F64 => complete_with::<f64>(&checkpoint, &d, &p)?,
            };
            save_dataset(&completed, &out)?;
            save_provenance(&provenance, &completed, &out)?;
            println!(
                "model-completed entries: {}",
                provenance.count(Source::Model)
            );
            Ok(())
        }
        Command::Evaluate {
            data,
            checkpoint,
            out,
            rho,
            split,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply(&mut settings.eval_rho, rho);
            apply(&mut settings.eval_split, split);
            settings.precision = scalar_of(&checkpoint)?;
            let (d, p) = load_completed(&data)?;
            let run_dir = create_run_dir(&out, &settings)?;
            let point = match settings.precision {
                Precision::F32 => evaluate_pair::<f32>(&settings, &checkpoint, &d, &p)?,
                Precision::F64 => evaluate_pair::<f64>(&settings, &checkpoint, &d, &p)?,
            };
            write_with(&run_dir.join("eval.tsv"), |f| {
                write_sweep_tsv(std::slice::from_ref(&point), f)
            })?;
            write_with(&run_dir.join("per_gene_pcc.tsv"), |f| {
                writeln!(f, "gene\tspackle\tmedian")?;
                let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
                for (j, gene) in d.genes.iter().enumerate() {
                    writeln!(
                        f,
                        "{gene}\t{}\t{}",
                        cell(point.spackle.per_gene_pcc[j]),
                        cell(point.median.per_gene_pcc[j])
                    )?;
                }
                Ok(())
            })?;
            let mut summary = header("Evaluation", &settings, &data);
            summary.push_str(&format!("- checkpoint: {}\n\n", checkpoint.display()));
            report::sweep_section(&mut summary, std::slice::from_ref(&point));
            write_text(&run_dir.join("summary.md"), &summary)?;
            println!(
                "rho {}: spackle mse {:.6} pcc {:.4} | median mse {:.6} pcc {:.4} | {} entries",
                point.rho,
                point.spackle.mse,
                point.spackle.pcc,
                point.median.mse,
                point.median.pcc,
                point.spackle.num_evaluated_entries
            );
            println!("{}", run_dir.display());
            Ok(())
        }
        Command::Sweep {
            data,
            checkpoint,
            out,
            rhos,
            split,
            no_plot,
            common,
        } => {
            let mut settings = resolve(&common)?;
            apply(&mut settings.rhos, rhos);
            apply(&mut settings.eval_split, split);
            settings.precision = scalar_of(&checkpoint)?;
            let (d, p) = load_completed(&data)?;
            let run_dir = create_run_dir(&out, &settings)?;
            let points = match settings.precision {
                Precision::F32 => sweep_with::<f32>(&settings, &checkpoint, &d, &p)?,
                Precision::F64 => sweep_with::<f64>(&settings, &checkpoint, &d, &p)?,
            };
            write_with(&run_dir.join("sweep.tsv"), |f| write_sweep_tsv(&points, f))?;
            if !no_plot {
                write_text(&run_dir.join("sweep.svg"), &report::sweep_svg(&points))?;
            }
            let mut summary = header("Corruption sweep", &settings, &data);
            summary.push_str(&format!("- checkpoint: {}\n\n", checkpoint.display()));
            report::sweep_section(&mut summary, &points);
            write_text(&run_dir.join("summary.md"), &summary)?;
            for pt in &points {
                println!(
                    "rho {}: spackle {:.6} median {:.6}",
                    pt.rho, pt.spackle.mse, pt.median.mse
                );
            }
            println!("{}", run_dir.display());
            Ok(())
        }
        Command::Neighbors {
            data,
            slide,
            row,
            col,
            hops,
        } => {
            if !(1..=2).contains(&hops) {
                return Err(CliError::Usage(format!(
                    "--hops must be 1 or 2, got {hops}"
                )));
            }
            let d = load(&data, false)?;
            let slide = slide.unwrap_or_else(|| d.slides[0].slide_id.clone());
            let spot = d
                .spots
                .iter()
                .position(|s| s.slide_id == slide && s.array_row == row && s.array_col == col)
                .ok_or(Error::UnknownSpot {
                    row: row as i64,
                    col: col as i64,
                })?;
            let graph = SpotGraph::new(&d)?;
            let limit = if hops == 1 { 6 } else { NUM_NEIGHBORS };
            println!("slot\tring\tspot_id\tarray_row\tarray_col");
            let center = &d.spots[spot];
            println!(
                "0\t0\t{}\t{}\t{}",
                center.spot_id, center.array_row, center.array_col
            );
            for (k, member) in graph.neighbor_slots(spot).iter().take(limit).enumerate() {
                let ring = TOKEN_RING[k + 1];
                match member {
                    Some(i) => {
                        let s = &d.spots[*i];
                        println!(
                            "{}\t{ring}\t{}\t{}\t{}",
                            k + 1,
                            s.spot_id,
                            s.array_row,
                            s.array_col
                        );
                    }
                    None => println!("{}\t{ring}\t-\t-\t-", k + 1),
                }
            }
            Ok(())
        }
    }
}

/// Settings from defaults, the config file and the common flags; also sizes
/// the worker pool.
fn resolve(common: &Common) -> CliResult<Settings> {
    let mut settings = Settings::load(common.config.as_deref())?;
    apply(&mut settings.seed, common.seed);
    if common.threads.is_some() {
        settings.threads = common.threads;
    }
    if let Some(n) = settings.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(settings)
}

fn apply_model(s: &mut Settings, m: &ModelArgs) {
    apply(&mut s.d_k, m.d_k);
    apply(&mut s.num_layers, m.num_layers);
    apply(&mut s.num_heads, m.num_heads);
    apply(&mut s.ffn_dim, m.ffn_dim);
    apply(&mut s.ring_embedding, m.ring_embedding);
    apply(&mut s.precision, m.precision);
}

fn apply_train(s: &mut Settings, t: &TrainArgs) {
    apply(&mut s.batch_size, t.batch_size);
    apply(&mut s.max_iterations, t.max_iterations);
    apply(&mut s.learning_rate, t.learning_rate);
    apply(&mut s.rho, t.rho);
    apply(&mut s.val_every, t.val_every);
    apply(&mut s.chunk_size, t.chunk_size);
}

fn load(path: &Path, zeros_are_missing: bool) -> CliResult<Dataset> {
    Ok(load_dataset_with(path, LoadOptions { zeros_are_missing })?)
}

fn load_completed(path: &Path) -> CliResult<(Dataset, CompletionProvenance)> {
    let d = load(path, false)?;
    if !d.completed {
        return Err(Error::InvalidDataset(format!(
            "{} is not median-completed; run `spackle median-complete` first",
            path.display()
        ))
        .into());
    }
    let p = load_provenance(path, &d)?
        .ok_or_else(|| Error::MissingFile(path.join("provenance.tsv")))?;
    Ok((d, p))
}

fn scalar_of(checkpoint: &Path) -> CliResult<Precision> {
    let tag = checkpoint_scalar(checkpoint)?;
    tag.parse().map_err(|e: String| Error::Checkpoint(e).into())
}

fn load_checkpoint<T: Scalar>(path: &Path, d: &Dataset) -> CliResult<Checkpoint<T>> {
    let ckpt = Checkpoint::<T>::load(path)?;
    ckpt.expect_genes(d.num_genes())?;
    Ok(ckpt)
}

fn train_run<T: Scalar>(
    settings: &Settings,
    data: &Path,
    d: &Dataset,
    p: &CompletionProvenance,
    run_dir: &Path,
) -> CliResult {
    let run = train::<T>(
        d,
        p,
        &settings.model_config(d.num_genes()),
        &settings.train_config(),
    )?;
    run.best.save(&run_dir.join("checkpoint.json"))?;
    write_with(&run_dir.join("metrics.tsv"), |f| {
        write_metrics_tsv(&run.history, f)
    })?;
    let mut summary = header("Training run", settings, data);
    summary.push_str(&format!(
        "- parameters: {}\n- spots: {} ({} genes)\n\n",
        run.best.params.len(),
        d.num_spots(),
        d.num_genes()
    ));
    report::training_section(
        &mut summary,
        &run.history,
        run.best.iteration,
        run.best.best_val_mse,
    );
    write_text(&run_dir.join("summary.md"), &summary)?;
    println!(
        "best validation MSE {:.6} at iteration {}",
        run.best.best_val_mse, run.best.iteration
    );
    Ok(())
}

fn complete_with<T: Scalar>(
    checkpoint: &Path,
    d: &Dataset,
    p: &CompletionProvenance,
) -> CliResult<(Dataset, CompletionProvenance)> {
    let ckpt = load_checkpoint::<T>(checkpoint, d)?;
    Ok(complete_dataset(d, p, &ckpt.params)?)
}

fn eval_options(settings: &Settings) -> EvalOptions {
    EvalOptions {
        split: settings.eval_split,
        max_radius_hops: settings.max_radius_hops,
    }
}

fn evaluate_pair<T: Scalar>(
    settings: &Settings,
    checkpoint: &Path,
    d: &Dataset,
    p: &CompletionProvenance,
) -> CliResult<SweepPoint> {
    let ckpt = load_checkpoint::<T>(checkpoint, d)?;
    let corruption = corrupt(
        d,
        p,
        settings.eval_rho,
        settings.seed,
        &eval_options(settings),
    )?;
    Ok(SweepPoint {
        rho: settings.eval_rho,
        spackle: evaluate(
            &ModelImputer {
                params: &ckpt.params,
            },
            &corruption,
        )?,
        median: evaluate(&MedianImputer, &corruption)?,
    })
}

fn sweep_with<T: Scalar>(
    settings: &Settings,
    checkpoint: &Path,
    d: &Dataset,
    p: &CompletionProvenance,
) -> CliResult<Vec<SweepPoint>> {
    let ckpt = load_checkpoint::<T>(checkpoint, d)?;
    Ok(corruption_sweep(
        &ckpt.params,
        d,
        p,
        &settings.rhos,
        settings.seed,
        &eval_options(settings),
    )?)
}

/// `<out>/<UTC timestamp>-seed<seed>`, holding the resolved config.
fn create_run_dir(out: &Path, settings: &Settings) -> CliResult<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let base = format!("{stamp}-seed{}", settings.seed);
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
    write_text(&dir.join("config.toml"), &settings.to_toml())?;
    Ok(dir)
}

fn header(title: &str, settings: &Settings, data: &Path) -> String {
    format!(
        "# {title}\n\n- dataset: {}\n- seed: {}\n- precision: {}\n- resolved settings: config.toml\n",
        data.display(),
        settings.seed,
        settings.precision
    )
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_with(path: &Path, body: impl FnOnce(&mut fs::File) -> std::io::Result<()>) -> CliResult {
    let mut file = fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    body(&mut file).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn describe(d: &Dataset) {
    println!(
        "{} spots, {} genes, {} slides, missing fraction {:.4}, normalized {}, completed {}",
        d.num_spots(),
        d.num_genes(),
        d.slides.len(),
        d.missing_fraction(),
        d.normalization_applied,
        d.completed
    );
}
