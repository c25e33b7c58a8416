//! The six subcommands. Each takes a resolved [`Experiment`] (except
//! `render`, which is a pure file transformation), writes its artifacts into
//! the run directory through the [`Outputs`] tracker, and drops a canonical
//! config snapshot beside them so a run is reconstructible from its directory
//! alone.

use std::fs;
use std::path::{Path, PathBuf};

use nowcast_core::baselines::{optical_flow_forecast, persistence_forecast};
use nowcast_core::data::{
    center_crop, make_hrrr_surrogate, read_sequence, window_dataset, write_sequence,
    DatasetWindow, GridMeta, RadarSequence, SurrogateParams, SyntheticConfig,
    gen_synthetic_sequence,
};
use nowcast_core::metrics::evaluate_run;
use nowcast_core::model::{
    forward, init_params, load_checkpoint, save_checkpoint, DBZ_RANGE,
};
use nowcast_core::tensor::Tensor;
use nowcast_core::train::{train_loop, write_loss_csv};

use crate::experiment::Experiment;
use crate::{CliError, Outputs, Result};

const SNAPSHOT_NAME: &str = "config.snapshot";

fn write_snapshot(exp: &Experiment, out_dir: &Path, outputs: &mut Outputs) -> Result<()> {
    outputs.write(&out_dir.join(SNAPSHOT_NAME), exp.snapshot().as_bytes())
}

fn sequence_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq_{i:03}.nwrs"))
}

fn forecast_path(dir: &Path, i: usize, j: usize) -> PathBuf {
    dir.join(format!("pred_{i:03}_{j:02}.nwrs"))
}

/// Generate `data.sequences` synthetic storm sequences at the full viewport
/// size, one NWRS file each, seeded `seed + i`.
pub fn gen_data(exp: &Experiment, out_dir: &Path, outputs: &mut Outputs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for i in 0..exp.sequences {
        let cfg = SyntheticConfig {
            seed: exp.sequence_seed(i),
            ..exp.synth.clone()
        };
        let seq = gen_synthetic_sequence(&cfg)?;
        let path = sequence_path(out_dir, i);
        outputs.note(&path);
        write_sequence(&path, &seq)?;
    }
    write_snapshot(exp, out_dir, outputs)
}

fn load_sequences(dir: &Path) -> Result<Vec<RadarSequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "nwrs")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no seq_*.nwrs sequences under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Ok(read_sequence(p)?)).collect()
}

/// All dataset windows across all sequences, adapted to the experiment's
/// variant: inputs center-cropped to the model's raster when the viewport
/// branch is off, conditioning surrogates attached when that branch is on.
fn prepared_windows(exp: &Experiment, data_dir: &Path) -> Result<Vec<(usize, usize, DatasetWindow)>> {
    let sequences = load_sequences(data_dir)?;
    let mut out = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for (j, mut w) in window_dataset(seq, &exp.window)?.into_iter().enumerate() {
            let have = w.input.shape()[1];
            let want = exp.model.input_side();
            if want > have {
                return Err(CliError::Usage(format!(
                    "sequence {i} frames are {have} px wide but the model viewport needs {want}; \
                     regenerate the data with this config"
                )));
            }
            if want < have {
                w.input = center_crop(&w.input, want)?;
            }
            if exp.model.use_hrrr {
                let target = center_crop(&w.target, exp.model.target_size)?;
                w.hrrr = Some(make_hrrr_surrogate(
                    &target,
                    exp.model.hrrr_frames,
                    exp.hrrr_quality,
                    exp.surrogate_seed(i, j),
                    &SurrogateParams::default(),
                )?);
            }
            out.push((i, j, w));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("the dataset yields no training windows".into()));
    }
    Ok(out)
}

/// Train the configured variant; writes `loss.csv`, the final live weights
/// (`model.ckpt`), and the weight-averaged ensemble (`model_swa.ckpt`).
pub fn train(exp: &Experiment, data_dir: &Path, out_dir: &Path, outputs: &mut Outputs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let samples = prepared_windows(exp, data_dir)?
        .iter()
        .map(|(_, _, w)| Ok(w.to_sample(&exp.model)?))
        .collect::<Result<Vec<_>>>()?;

    let mut params = init_params::<f32>(&exp.model, exp.seed)?;
    let outcome = train_loop(&mut params, &exp.model, &samples, &exp.train, |_, _| Ok(()))?;

    let loss_path = out_dir.join("loss.csv");
    outputs.note(&loss_path);
    write_loss_csv(&loss_path, &outcome.trace)?;

    let live_path = out_dir.join("model.ckpt");
    outputs.note(&live_path);
    save_checkpoint(&live_path, &params)?;

    let swa_path = out_dir.join("model_swa.ckpt");
    outputs.note(&swa_path);
    save_checkpoint(&swa_path, &outcome.swa_params)?;

    write_snapshot(exp, out_dir, outputs)
}

/// Forecast frames in dBZ from a normalized prediction tensor `[1,T,1,S,S]`.
fn denormalized_frames(pred: &Tensor<f32>) -> (Vec<usize>, Vec<f32>) {
    let shape = pred.shape();
    let (t, s) = (shape[1], shape[3]);
    let data = pred
        .data()
        .iter()
        .map(|v| (f64::from(*v) * DBZ_RANGE).clamp(0.0, DBZ_RANGE) as f32)
        .collect();
    (vec![t, s, s], data)
}

/// Run a checkpoint over every dataset window, writing one forecast sequence
/// per window with the window's target minutes as offsets.
pub fn predict(
    exp: &Experiment,
    data_dir: &Path,
    ckpt: &Path,
    out_dir: &Path,
    outputs: &mut Outputs,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let params = load_checkpoint::<f32>(ckpt, &exp.model)?;
    for (i, j, w) in prepared_windows(exp, data_dir)? {
        let sample = w.to_sample(&exp.model)?;
        let pred = forward(&sample.frames, sample.hrrr.as_ref(), &params, &exp.model)?;
        let (shape, data) = denormalized_frames(&pred);
        let seq = RadarSequence::new(
            Tensor::new(shape, data),
            w.target_minutes.clone(),
            GridMeta::default(),
            format!("pred-{i:03}-{j:02}"),
        )?;
        let path = forecast_path(out_dir, i, j);
        outputs.note(&path);
        write_sequence(&path, &seq)?;
    }
    write_snapshot(exp, out_dir, outputs)
}

/// Extrapolation baselines over the same windows and output format as
/// `predict`, operating on the target-viewport crop of the observed frames.
pub fn baseline(
    exp: &Experiment,
    method: &str,
    data_dir: &Path,
    out_dir: &Path,
    outputs: &mut Outputs,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let t_out = exp.model.t_out;
    for (i, j, w) in prepared_windows(exp, data_dir)? {
        let observed = center_crop(&w.input, exp.model.target_size)?;
        let t_in = observed.shape()[0];
        let side = observed.shape()[1];
        let hw = side * side;
        let frame = |t: usize| {
            Tensor::new(
                vec![side, side],
                observed.data()[t * hw..(t + 1) * hw].to_vec(),
            )
        };
        let forecast = match method {
            "persistence" => persistence_forecast(&frame(t_in - 1), t_out)?,
            "optical-flow" => {
                if t_in < 2 {
                    return Err(CliError::Usage(
                        "optical-flow needs at least two input frames".into(),
                    ));
                }
                let ratio =
                    f64::from(exp.window.target_cadence_min) / f64::from(exp.window.input_cadence_min);
                optical_flow_forecast(
                    &frame(t_in - 2),
                    &frame(t_in - 1),
                    t_out,
                    ratio,
                    exp.flow_levels,
                    exp.flow_window,
                )?
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown baseline method {other:?}; expected persistence or optical-flow"
                )))
            }
        };
        let seq = RadarSequence::new(
            forecast,
            w.target_minutes.clone(),
            GridMeta::default(),
            format!("pred-{i:03}-{j:02}"),
        )?;
        let path = forecast_path(out_dir, i, j);
        outputs.note(&path);
        write_sequence(&path, &seq)?;
    }
    write_snapshot(exp, out_dir, outputs)
}

fn forecast_indices(path: &Path) -> Option<(usize, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let rest = stem.strip_prefix("pred_")?;
    let (i, j) = rest.split_once('_')?;
    Some((i.parse().ok()?, j.parse().ok()?))
}

/// Score a directory of forecast sequences against the matching dataset
/// windows; writes `metrics.csv`.
pub fn evaluate(
    exp: &Experiment,
    data_dir: &Path,
    forecast_dir: &Path,
    out_dir: &Path,
    outputs: &mut Outputs,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(forecast_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "nwrs"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no forecast sequences under {}",
            forecast_dir.display()
        )));
    }

    let windows = prepared_windows(exp, data_dir)?;
    let find = |i: usize, j: usize| windows.iter().find(|(wi, wj, _)| *wi == i && *wj == j);

    let mut forecasts = Vec::with_capacity(files.len());
    let mut truths = Vec::with_capacity(files.len());
    let mut lead_minutes: Option<Vec<i32>> = None;
    for path in &files {
        let (i, j) = forecast_indices(path).ok_or_else(|| {
            CliError::Usage(format!(
                "forecast file {} is not named pred_<seq>_<window>.nwrs",
                path.display()
            ))
        })?;
        let (_, _, w) = find(i, j).ok_or_else(|| {
            CliError::Usage(format!(
                "forecast {} has no matching dataset window",
                path.display()
            ))
        })?;
        let pred = read_sequence(path)?;
        if pred.minute_offsets() != w.target_minutes {
            return Err(CliError::Usage(format!(
                "forecast {} offsets {:?} disagree with the window's target minutes {:?}",
                path.display(),
                pred.minute_offsets(),
                w.target_minutes
            )));
        }
        let last_input = *w.input_minutes.last().expect("windows are never empty");
        let leads: Vec<i32> = w.target_minutes.iter().map(|m| m - last_input).collect();
        match &lead_minutes {
            None => lead_minutes = Some(leads),
            Some(existing) if *existing != leads => {
                return Err(CliError::Usage(format!(
                    "forecast {} lead grid {:?} differs from {:?}",
                    path.display(),
                    leads,
                    existing
                )));
            }
            Some(_) => {}
        }
        let truth = center_crop(&w.target, pred.side())?;
        forecasts.push(pred.frames().clone());
        truths.push(truth);
    }

    let leads = lead_minutes.expect("at least one forecast file");
    let report = evaluate_run(&forecasts, &truths, &leads, DBZ_RANGE)?;
    outputs.write(&out_dir.join("metrics.csv"), report.to_csv().as_bytes())?;
    write_snapshot(exp, out_dir, outputs)
}

/// dBZ → 8-bit gray: [0, 70] maps linearly onto [0, 255] with floor
/// rounding, so 35 dBZ lands on 127.
pub fn dbz_to_gray(v: f32) -> u8 {
    ((f64::from(v).clamp(0.0, DBZ_RANGE) / DBZ_RANGE) * 255.0).floor() as u8
}

fn pgm_bytes(frame: &[f32], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(frame.iter().map(|v| dbz_to_gray(*v)));
    out
}

/// Emit grayscale rasters (binary PGM) of a forecast next to its truth, one
/// `pred_<minute>.pgm` / `true_<minute>.pgm` pair per forecast frame. The
/// truth sequence just needs a frame at each forecast minute — pass the
/// original `seq_*.nwrs` and its frames are center-cropped to the forecast
/// raster.
pub fn render(pred_path: &Path, truth_path: &Path, out_dir: &Path, outputs: &mut Outputs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let pred = read_sequence(pred_path)?;
    let truth = read_sequence(truth_path)?;
    let side = pred.side();
    if truth.side() < side {
        return Err(CliError::Usage(format!(
            "truth raster is {} px, smaller than the {side} px forecast",
            truth.side()
        )));
    }
    let hw = side * side;
    for (t, minute) in pred.minute_offsets().iter().enumerate() {
        let k = truth
            .minute_offsets()
            .iter()
            .position(|m| m == minute)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "truth sequence has no frame at minute {minute} (offsets {:?})",
                    truth.minute_offsets()
                ))
            })?;
        let tside = truth.side();
        let full = Tensor::new(vec![1, tside, tside], truth.frame(k).data().to_vec());
        let cropped = center_crop(&full, side)?;
        outputs.write(
            &out_dir.join(format!("true_{minute}.pgm")),
            &pgm_bytes(cropped.data(), side),
        )?;
        let frame = &pred.frames().data()[t * hw..(t + 1) * hw];
        outputs.write(
            &out_dir.join(format!("pred_{minute}.pgm")),
            &pgm_bytes(frame, side),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping_endpoints_and_midpoint() {
        assert_eq!(dbz_to_gray(0.0), 0);
        assert_eq!(dbz_to_gray(70.0), 255);
        assert_eq!(dbz_to_gray(35.0), 127); // floor of 127.5
        assert_eq!(dbz_to_gray(-5.0), 0);
        assert_eq!(dbz_to_gray(90.0), 255);
    }

    #[test]
    fn pgm_header_and_payload() {
        let bytes = pgm_bytes(&[0.0, 70.0, 35.0, 70.0], 2);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 127, 255]);
    }

    #[test]
    fn forecast_filenames_round_trip() {
        let p = forecast_path(Path::new("/tmp/run"), 3, 12);
        assert_eq!(forecast_indices(&p), Some((3, 12)));
        assert_eq!(forecast_indices(Path::new("seq_000.nwrs")), None);
        assert_eq!(forecast_indices(Path::new("pred_x_y.nwrs")), None);
    }
}
