//! Training loops: single-branch base pretraining (all weights) and joint
//! training (frozen base, adapter-only updates) under the balanced
//! two-domain loss total = L_x + lambda * L_i with independently sampled
//! per-domain noise.

use std::path::{Path, PathBuf};

use crate::denoiser::{build_cond_ids, null_cond_ids, Denoiser, DenoiserConfig, DiffusionMeta};
use crate::error::{Error, Result};
use crate::graph::{AdamWConfig, ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::schedule::{build_linear_schedule, forward_diffuse, to_v_target, NoiseSchedule, Parameterization};
use crate::tensor::Tensor;
use crate::xattn::AttnWeightSchedule;

/// One logged training step.
#[derive(Clone, Debug)]
pub struct LossRow {
    pub step: usize,
    pub loss_x: f32,
    pub loss_i: f32,
    pub total: f32,
    pub wall_s: f64,
}

/// CSV schema: step,loss_x,loss_i,total,wall_clock_s
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss_x,loss_i,total,wall_clock_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.step, r.loss_x, r.loss_i, r.total, r.wall_s
        ));
    }
    out
}

/// Balanced two-domain objective on tape. The reported total is computed by
/// the same f32 operations as the recomposition loss_x + lambda * loss_i, so
/// the decomposition is exact.
pub fn joint_loss(
    tape: &mut Tape,
    pred_x: Var,
    pred_i: Var,
    target_x: Tensor,
    target_i: Tensor,
    lambda: f64,
) -> Result<(Var, LossRow)> {
    if tape.value(pred_x).shape() != target_x.shape()
        || tape.value(pred_i).shape() != target_i.shape()
    {
        return Err(Error::contract("joint_loss: prediction/target shape mismatch"));
    }
    let lx = tape.mse(pred_x, target_x, None);
    let li = tape.mse(pred_i, target_i, None);
    let li_scaled = tape.scale(li, lambda as f32);
    let total = tape.add(lx, li_scaled);
    let row = LossRow {
        step: 0,
        loss_x: tape.scalar_value(lx),
        loss_i: tape.scalar_value(li),
        total: tape.scalar_value(total),
        wall_s: 0.0,
    };
    Ok((total, row))
}

#[derive(Clone, Debug)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub cond_drop_prob: f64,
    pub param: Parameterization,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub log_every: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            steps: 8000,
            batch: 8,
            lr: 8e-4,
            seed: 0,
            cond_drop_prob: 0.1,
            param: Parameterization::Epsilon,
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            log_every: 50,
        }
    }
}

impl BaseTrainConfig {
    pub fn diffusion_meta(&self) -> DiffusionMeta {
        DiffusionMeta { t_steps: self.t_steps, beta_start: self.beta_start, beta_end: self.beta_end }
    }
}

fn draw_batch(
    rng: &mut Rng,
    n_data: usize,
    batch: usize,
    t_steps: usize,
) -> (Vec<usize>, Vec<usize>) {
    let idx: Vec<usize> = (0..batch).map(|_| rng.below(n_data)).collect();
    let ts: Vec<usize> = (0..batch).map(|_| rng.below(t_steps)).collect();
    (idx, ts)
}

fn noised_batch(
    latents: &[Tensor],
    idx: &[usize],
    ts: &[usize],
    sched: &NoiseSchedule,
    param: Parameterization,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let mut noisy = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    for (&i, &t) in idx.iter().zip(ts.iter()) {
        let x0 = &latents[i];
        let eps = Tensor::randn(x0.shape(), rng);
        noisy.push(forward_diffuse(x0, t, &eps, sched)?);
        targets.push(match param {
            Parameterization::Epsilon => eps,
            Parameterization::V => to_v_target(x0, &eps, t, sched)?,
        });
    }
    Ok((crate::codec::stack_batch(&noisy)?, crate::codec::stack_batch(&targets)?))
}

fn cond_ids_with_dropout(
    captions: &[Vec<u8>],
    idx: &[usize],
    max_tokens: usize,
    drop_prob: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let toks: Vec<Vec<u8>> = idx.iter().map(|&i| captions[i].clone()).collect();
    let mut ids = build_cond_ids(&toks, max_tokens);
    for (b, _) in idx.iter().enumerate() {
        if rng.bernoulli(drop_prob) {
            let null = null_cond_ids(1, max_tokens);
            ids[b * max_tokens..(b + 1) * max_tokens].copy_from_slice(&null);
        }
    }
    ids
}

/// Single-domain pretraining of the base model on image latents only.
/// Everything is trainable; the result is later frozen for joint training.
pub fn pretrain_base(
    image_latents: &[Tensor],
    captions: &[Vec<u8>],
    model_cfg: &DenoiserConfig,
    tc: &BaseTrainConfig,
) -> Result<(Denoiser, ParamStore, Vec<LossRow>)> {
    if image_latents.is_empty() || image_latents.len() != captions.len() {
        return Err(Error::contract("pretrain_base: latents/captions must be nonempty and aligned"));
    }
    let sched = build_linear_schedule(tc.t_steps, tc.beta_start, tc.beta_end)?;
    let mut rng = Rng::new(tc.seed);
    let mut store = ParamStore::new();
    let model = Denoiser::build(&mut store, model_cfg, &mut rng, false);
    let adam = AdamWConfig { lr: tc.lr, ..Default::default() };
    let mut log = Vec::new();
    let t0 = std::time::Instant::now();
    for step in 0..tc.steps {
        let (idx, ts) = draw_batch(&mut rng, image_latents.len(), tc.batch, tc.t_steps);
        let (noisy, target) = noised_batch(image_latents, &idx, &ts, &sched, tc.param, &mut rng)?;
        let cond = cond_ids_with_dropout(captions, &idx, model_cfg.max_tokens, tc.cond_drop_prob, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(noisy);
        let pred = model.forward_image_only(&mut tape, &store, xv, &ts, &cond)?;
        let loss = tape.mse(pred, target, None);
        let loss_v = tape.scalar_value(loss);
        if !loss_v.is_finite() {
            return Err(Error::numeric(format!("pretrain_base: non-finite loss at step {step}")));
        }
        store.zero_grads();
        tape.backward(loss, &mut store);
        let frac = step as f64 / tc.steps.max(1) as f64;
        let lr = tc.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        store.adamw_step(&AdamWConfig { lr, ..adam });
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            log.push(LossRow {
                step,
                loss_x: loss_v,
                loss_i: 0.0,
                total: loss_v,
                wall_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok((model, store, log))
}

#[derive(Clone, Debug)]
pub struct JointTrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub cond_drop_prob: f64,
    pub train_schedule: AttnWeightSchedule,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        JointTrainConfig {
            lambda: 4.0,
            steps: 20_000,
            batch: 16,
            lr: 2e-4,
            seed: 0,
            cond_drop_prob: 0.1,
            train_schedule: AttnWeightSchedule::Full,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

/// Joint trainer: owns the adapter-extended model, the frozen base weights,
/// and the precomputed latent dataset.
pub struct JointTrainer {
    pub model: Denoiser,
    pub store: ParamStore,
    pub sched: NoiseSchedule,
    pub diff: DiffusionMeta,
    pub cfg: JointTrainConfig,
    image_latents: Vec<Tensor>,
    intrinsic_latents: Vec<Tensor>,
    captions: Vec<Vec<u8>>,
    rng: Rng,
    step: usize,
    t0: std::time::Instant,
    pub last_checkpoint: Option<PathBuf>,
    base_hash: u64,
}

impl JointTrainer {
    /// `base_path` is a checkpoint from `pretrain_base`; adapters are created
    /// fresh (B = 0) on top, with only the adapters trainable.
    pub fn from_base_checkpoint(
        base_path: &Path,
        lora_rank: usize,
        lora_scale: f32,
        lora_cross: bool,
        lora_time_cond: bool,
        image_latents: Vec<Tensor>,
        intrinsic_latents: Vec<Tensor>,
        captions: Vec<Vec<u8>>,
        cfg: JointTrainConfig,
    ) -> Result<JointTrainer> {
        cfg.train_schedule.validate()?;
        if image_latents.is_empty()
            || image_latents.len() != intrinsic_latents.len()
            || image_latents.len() != captions.len()
        {
            return Err(Error::contract("joint trainer: dataset slices must be nonempty and aligned"));
        }
        if image_latents[0].shape() != intrinsic_latents[0].shape() {
            return Err(Error::contract(format!(
                "latent shape mismatch: image {:?} vs intrinsic {:?}",
                image_latents[0].shape(),
                intrinsic_latents[0].shape()
            )));
        }
        let c = crate::container::Container::read_from(base_path)?;
        let base_cfg = {
            let (_, base_store, _) = crate::denoiser::load_denoiser(base_path)?;
            drop(base_store);
            // reuse the loader's config parsing via a second load below
        };
        let _ = base_cfg;
        let (base_model, _, diff) = crate::denoiser::load_denoiser(base_path)?;
        let model_cfg = DenoiserConfig {
            lora_rank,
            lora_scale,
            lora_cross,
            lora_time_cond,
            ..base_model.cfg.clone()
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let model = Denoiser::build(&mut store, &model_cfg, &mut rng, true);
        store.load_matching(&c, "p/")?;
        model.freeze_base(&mut store);
        let base_hash = store.hash_subset(|n| !n.starts_with("lora/"));
        let sched = build_linear_schedule(diff.t_steps, diff.beta_start, diff.beta_end)?;
        Ok(JointTrainer {
            model,
            store,
            sched,
            diff,
            cfg,
            image_latents,
            intrinsic_latents,
            captions,
            rng,
            step: 0,
            t0: std::time::Instant::now(),
            last_checkpoint: None,
            base_hash,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Hash of the frozen base parameters at construction time; compare with
    /// `current_base_hash` to assert the freezing contract.
    pub fn initial_base_hash(&self) -> u64 {
        self.base_hash
    }

    pub fn current_base_hash(&self) -> u64 {
        self.store.hash_subset(|n| !n.starts_with("lora/"))
    }

    /// One optimization step on the adapters; independent noise per domain.
    pub fn train_step(&mut self) -> Result<LossRow> {
        let t_steps = self.sched.steps();
        let (idx, ts) = draw_batch(&mut self.rng, self.image_latents.len(), self.cfg.batch, t_steps);
        // independent eps_x then eps_i, interleaved per example
        let param = self.model.cfg.param;
        let mut noisy_x = Vec::with_capacity(idx.len());
        let mut target_x = Vec::with_capacity(idx.len());
        let mut noisy_i = Vec::with_capacity(idx.len());
        let mut target_i = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(ts.iter()) {
            let x0 = &self.image_latents[i];
            let i0 = &self.intrinsic_latents[i];
            let eps_x = Tensor::randn(x0.shape(), &mut self.rng);
            let eps_i = Tensor::randn(i0.shape(), &mut self.rng);
            noisy_x.push(forward_diffuse(x0, t, &eps_x, &self.sched)?);
            noisy_i.push(forward_diffuse(i0, t, &eps_i, &self.sched)?);
            match param {
                Parameterization::Epsilon => {
                    target_x.push(eps_x);
                    target_i.push(eps_i);
                }
                Parameterization::V => {
                    target_x.push(to_v_target(x0, &eps_x, t, &self.sched)?);
                    target_i.push(to_v_target(i0, &eps_i, t, &self.sched)?);
                }
            }
        }
        let cond = cond_ids_with_dropout(
            &self.captions,
            &idx,
            self.model.cfg.max_tokens,
            self.cfg.cond_drop_prob,
            &mut self.rng,
        );
        let t_paper: Vec<f64> = ts.iter().map(|&t| self.sched.to_paper_time(t)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(crate::codec::stack_batch(&noisy_x)?);
        let iv = tape.leaf(crate::codec::stack_batch(&noisy_i)?);
        let out = self.model.forward_dual(
            &mut tape,
            &self.store,
            xv,
            iv,
            &ts,
            &t_paper,
            &cond,
            &self.cfg.train_schedule,
        )?;
        let pred_i = out.pred_i.expect("dual forward yields both predictions");
        let (total, mut row) = joint_loss(
            &mut tape,
            out.pred_x,
            pred_i,
            crate::codec::stack_batch(&target_x)?,
            crate::codec::stack_batch(&target_i)?,
            self.cfg.lambda,
        )?;
        if !row.total.is_finite() {
            let hint = match &self.last_checkpoint {
                Some(p) => format!("; last good checkpoint: {}", p.display()),
                None => String::new(),
            };
            return Err(Error::numeric(format!(
                "joint training: non-finite loss at step {}{hint}",
                self.step
            )));
        }
        self.store.zero_grads();
        tape.backward(total, &mut self.store);
        let frac = self.step as f64 / self.cfg.steps.max(1) as f64;
        let lr = self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.store.adamw_step(&AdamWConfig { lr, ..Default::default() });
        row.step = self.step;
        row.wall_s = self.t0.elapsed().as_secs_f64();
        self.step += 1;
        Ok(row)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        crate::denoiser::save_denoiser(path, &self.model, &self.store, &self.diff)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Run the configured number of steps with periodic checkpoints.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<LossRow>> {
        let mut log = Vec::new();
        for _ in 0..self.cfg.steps {
            let row = self.train_step()?;
            let at_log = row.step % self.cfg.log_every == 0 || row.step + 1 == self.cfg.steps;
            if at_log {
                log.push(row.clone());
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0
                    && (row.step + 1) % self.cfg.checkpoint_every == 0
                {
                    self.save_checkpoint(&dir.join("ckpt_latest.ildc"))?;
                }
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;

    fn tiny_latents(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>, Vec<Vec<u8>>) {
        let mut rng = Rng::new(seed);
        let mk = |rng: &mut Rng| -> Vec<Tensor> {
            (0..n).map(|_| Tensor::randn(&[4, 8, 8], rng)).collect()
        };
        let xs = mk(&mut rng);
        let is = mk(&mut rng);
        let caps: Vec<Vec<u8>> = (0..n)
            .map(|k| crate::scenegen::tokenize(if k % 2 == 0 { "one red sphere on a plane" } else { "two blue boxes on a plane" }).unwrap())
            .collect();
        (xs, is, caps)
    }

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig { latent_hw: 8, ..Default::default() }
    }

    #[test]
    fn joint_loss_examples_and_exact_decomposition() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let q = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        // identical pred/target -> 0
        let (total, row) =
            joint_loss(&mut tape, p, p, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), 4.0).unwrap();
        assert_eq!(tape.scalar_value(total), 0.0);
        assert_eq!(row.total, 0.0);
        // L_x = 1, L_i = 1, lambda = 4 -> 5
        let (_, row) = joint_loss(&mut tape, q, q, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), 4.0).unwrap();
        assert_eq!(row.total, 5.0);
        // lambda = 0 -> total == L_x exactly
        let (_, row) = joint_loss(&mut tape, q, p, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap(), 0.0).unwrap();
        assert_eq!(row.total, row.loss_x);
        // decomposition: total recomposes exactly in the same f32 arithmetic
        let (_, row) = joint_loss(&mut tape, q, p, Tensor::from_vec(&[2], vec![0.3, 0.7]).unwrap(), Tensor::from_vec(&[2], vec![0.9, 0.1]).unwrap(), 4.0).unwrap();
        assert_eq!(row.total, row.loss_x + 4.0f32 * row.loss_i);
    }

    #[test]
    fn joint_loss_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2]));
        let e = joint_loss(&mut tape, p, p, Tensor::zeros(&[3]), Tensor::zeros(&[2]), 4.0).unwrap_err();
        assert_eq!(e.category(), "contract");
    }

    #[test]
    fn noise_independence_between_domains() {
        // the trainer draws eps_x then eps_i from one stream; empirical
        // correlation over 10^4 paired draws stays within 3 standard errors
        let mut rng = Rng::new(42);
        let n = 10_000;
        let mut sum_xy = 0.0f64;
        let mut sum_x = 0.0f64;
        let mut sum_y = 0.0f64;
        let mut sum_x2 = 0.0f64;
        let mut sum_y2 = 0.0f64;
        for _ in 0..n {
            let ex = Tensor::randn(&[1], &mut rng).data()[0] as f64;
            let ei = Tensor::randn(&[1], &mut rng).data()[0] as f64;
            sum_x += ex;
            sum_y += ei;
            sum_xy += ex * ei;
            sum_x2 += ex * ex;
            sum_y2 += ei * ei;
        }
        let nf = n as f64;
        let cov = sum_xy / nf - (sum_x / nf) * (sum_y / nf);
        let vx = sum_x2 / nf - (sum_x / nf).powi(2);
        let vy = sum_y2 / nf - (sum_y / nf).powi(2);
        let corr = cov / (vx * vy).sqrt();
        let se = 1.0 / nf.sqrt();
        assert!(corr.abs() < 3.0 * se, "corr {corr} vs 3se {}", 3.0 * se);
    }

    fn quick_base(dir: &Path, steps: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>, Vec<Vec<u8>>, PathBuf) {
        let (xs, is, caps) = tiny_latents(16, seed);
        let tc = BaseTrainConfig { steps, batch: 8, lr: 1.5e-3, seed, ..Default::default() };
        let (model, store, _) = pretrain_base(&xs, &caps, &tiny_cfg(), &tc).unwrap();
        std::fs::create_dir_all(dir).unwrap();
        let path = dir.join("base.ildc");
        crate::denoiser::save_denoiser(&path, &model, &store, &tc.diffusion_meta()).unwrap();
        (xs, is, caps, path)
    }

    #[test]
    fn frozen_base_is_bit_identical_after_joint_steps() {
        let dir = std::env::temp_dir().join("ildm-train-freeze");
        let (xs, is, caps, base) = quick_base(&dir, 30, 7);
        let cfg = JointTrainConfig { steps: 5, batch: 4, log_every: 1, ..Default::default() };
        let mut tr =
            JointTrainer::from_base_checkpoint(&base, 4, 1.0, false, false, xs, is, caps, cfg).unwrap();
        let h0 = tr.initial_base_hash();
        for _ in 0..5 {
            tr.train_step().unwrap();
        }
        assert_eq!(tr.current_base_hash(), h0, "base weights must not move");
        // adapters did move
        let lora_moved = tr
            .store
            .ids()
            .filter(|&id| tr.store.name(id).starts_with("lora/"))
            .any(|id| tr.store.get(id).data().iter().any(|&v| v != 0.0));
        assert!(lora_moved);
        // frozen parameter gradients are exactly zero
        for id in tr.store.ids() {
            if !tr.store.name(id).starts_with("lora/") {
                assert_eq!(tr.store.grad_l2_norm(id), 0.0, "{}", tr.store.name(id));
            }
        }
    }

    #[test]
    fn fixed_seed_gives_bit_identical_loss_trajectory() {
        let dir = std::env::temp_dir().join("ildm-train-determinism");
        let (xs, is, caps, base) = quick_base(&dir, 20, 9);
        let run = || -> Vec<u32> {
            let cfg = JointTrainConfig { steps: 4, batch: 4, log_every: 1, ..Default::default() };
            let mut tr = JointTrainer::from_base_checkpoint(
                &base,
                4,
                1.0,
                false,
                false,
                xs.clone(),
                is.clone(),
                caps.clone(),
                cfg,
            )
            .unwrap();
            (0..4).map(|_| tr.train_step().unwrap().total.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn base_pretraining_ignores_intrinsics_and_overfits() {
        // 16-sample smoke: loss falls well below its start
        let (xs, _, caps) = tiny_latents(16, 3);
        let tc = BaseTrainConfig { steps: 1500, batch: 16, lr: 1.5e-3, seed: 3, log_every: 10, ..Default::default() };
        let (_, _, log) = pretrain_base(&xs, &caps, &tiny_cfg(), &tc).unwrap();
        let first = log.first().unwrap().total;
        let last_avg: f32 =
            log.iter().rev().take(5).map(|r| r.total).sum::<f32>() / 5.0;
        assert!(
            last_avg < 0.01_f32.max(first * 0.1),
            "base overfit insufficient: {first} -> {last_avg}"
        );
    }

    #[test]
    fn joint_total_loss_halves_from_step0() {
        let dir = std::env::temp_dir().join("ildm-train-joint-smoke");
        // intrinsic latents mirror image latents at a fixed offset so the
        // adapters have real signal to learn at this tiny budget
        let (xs, _, caps, base) = quick_base(&dir, 1200, 11);
        let is: Vec<Tensor> = xs.iter().map(|x| x.map(|v| -v)).collect();
        let cfg = JointTrainConfig {
            steps: 700,
            batch: 8,
            lr: 2e-3,
            log_every: 10,
            seed: 5,
            ..Default::default()
        };
        let mut tr =
            JointTrainer::from_base_checkpoint(&base, 8, 1.0, false, false, xs, is, caps, cfg).unwrap();
        let mut rows = Vec::new();
        for _ in 0..700 {
            rows.push(tr.train_step().unwrap());
        }
        let first = rows.first().unwrap().total;
        let tail: f32 = rows.iter().rev().take(20).map(|r| r.total).sum::<f32>() / 20.0;
        assert!(tail < 0.5 * first, "joint loss should at least halve: {first} -> {tail}");
    }

    #[test]
    fn loss_csv_schema() {
        let rows = vec![LossRow { step: 0, loss_x: 1.0, loss_i: 0.5, total: 3.0, wall_s: 1.25 }];
        let csv = loss_csv(&rows);
        assert!(csv.starts_with("step,loss_x,loss_i,total,wall_clock_s\n"));
        assert!(csv.contains("0,1,0.5,3,1.250"));
    }
}
