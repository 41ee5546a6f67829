//! One function per subcommand.

use std::path::Path;

use orbitmask::checkpoint::{load_checkpoint, read_sections, Checkpoint, CheckpointMeta, RngState};
use orbitmask::datagen::{build_dataset, load_dataset, ObjectRecord, Split};
use orbitmask::image::{read_image, write_image, ImageGrid};
use orbitmask::metrics::{
    ablate_schedules, ablation_csv, cross_view_consistency, palette_bin, psnr, ssim, token_accuracy,
};
use orbitmask::model::{LossWeighting, ModelConfig, ModelParams};
use orbitmask::optim::AdamWConfig;
use orbitmask::sampler::{Pipeline, SamplerConfig, Schedule};
use orbitmask::sequence::{DEFAULT_I2MV_PROMPT, DEFAULT_MMU_PROMPT, DEFAULT_T2MV_PROMPT};
use orbitmask::tokenizer::{
    train_tokenizer_with, ImageTokenizer, LfqTokenizer, TokenizerConfig, TokenizerTrainConfig,
};
use orbitmask::trainer::{append_trace_row, lr_at, stage_examples, Stage, TrainConfig, TrainState, TRACE_HEADER};
use orbitmask::{Error, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;
use crate::error::CliError;
use crate::run::RunDir;
use crate::Common;

type CliResult = Result<(), CliError>;

fn settings(common: &Common, defaults: &[(&'static str, &str)]) -> Result<Settings, CliError> {
    let mut all = vec![("seed", "0")];
    all.extend_from_slice(defaults);
    let mut s = Settings::new(&all);
    if let Some(path) = &common.config {
        s.merge_file(path)?;
    }
    s.merge_overrides(&common.overrides)?;
    s.set_opt("seed", common.seed)?;
    Ok(s)
}

fn select_split(objects: Vec<ObjectRecord>, split: &str) -> Result<Vec<ObjectRecord>, CliError> {
    let keep: Box<dyn Fn(&ObjectRecord) -> bool> = match split {
        "all" => Box::new(|_| true),
        "train" => Box::new(|o| o.split == Split::Train),
        "heldout" => Box::new(|o| o.split == Split::Heldout),
        other => return Err(CliError::Config(format!("split must be train, heldout or all, got {other:?}"))),
    };
    let picked: Vec<_> = objects.into_iter().filter(|o| keep(o)).collect();
    if picked.is_empty() {
        return Err(CliError::Config(format!("the {split} split of the dataset is empty")));
    }
    Ok(picked)
}

fn load_objects(s: &Settings) -> Result<Vec<ObjectRecord>, CliError> {
    let objects = load_dataset(Path::new(s.required("data")?))?;
    let mut picked = select_split(objects, s.raw("split")?)?;
    if s.raw("max_objects").is_ok() {
        let max: usize = s.get("max_objects")?;
        if max > 0 {
            picked.truncate(max);
        }
    }
    Ok(picked)
}

fn require_tokenizer(ckpt: &Checkpoint) -> Result<&LfqTokenizer, CliError> {
    ckpt.tokenizer
        .as_ref()
        .ok_or_else(|| CliError::Config("checkpoint has no tokenizer section; run train-tokenizer first".into()))
}

pub fn gen_data(common: &Common, n_objects: Option<usize>) -> CliResult {
    let mut s = settings(common, &[("n_objects", "100")])?;
    s.set_opt("n_objects", n_objects)?;
    let mut run = RunDir::create(&common.out, &s, "gen-data")?;
    let entries = build_dataset(s.get("n_objects")?, s.get("seed")?, run.root())?;
    run.record(orbitmask::datagen::MANIFEST_FILE);
    for e in &entries {
        let dir = e.views[0].rsplit_once('/').map(|(d, _)| d).unwrap_or("");
        run.record(&format!("{dir}/caption.txt"));
        run.record(&format!("{dir}/spec.txt"));
        for v in &e.views {
            run.record(v);
        }
    }
    println!("wrote {} objects to {}", entries.len(), run.root().display());
    run.finish()
}

const MODEL_KEYS: [(&str, &str); 6] = [
    ("model.d", "128"),
    ("model.n_layers", "4"),
    ("model.n_heads", "4"),
    ("model.max_seq_len", "512"),
    ("model.ffn_mult", "4"),
    ("vocab.text_size", "256"),
];

pub fn train_tokenizer(common: &Common, data: Option<String>, epochs: Option<usize>) -> CliResult {
    let d = TokenizerTrainConfig::default();
    let defaults = [
        ("data", String::new()),
        ("split", "train".into()),
        ("tok.epochs", d.epochs.to_string()),
        ("tok.batch_size", d.batch_size.to_string()),
        ("tok.lr", d.lr.to_string()),
        ("tok.entropy_weight", d.entropy_weight.to_string()),
        ("tok.commitment_weight", d.commitment_weight.to_string()),
        ("tok.patch_size", d.model.patch_size.to_string()),
        ("tok.bits", d.model.bits.to_string()),
        ("tok.hidden", d.model.hidden.to_string()),
    ];
    let mut all: Vec<(&'static str, &str)> = defaults.iter().map(|(k, v)| (*k, v.as_str())).collect();
    all.extend_from_slice(&MODEL_KEYS);
    let mut s = settings(common, &all)?;
    s.set_opt("data", data)?;
    s.set_opt("tok.epochs", epochs)?;
    let seed: u64 = s.get("seed")?;
    let cfg = TokenizerTrainConfig {
        model: TokenizerConfig {
            patch_size: s.get("tok.patch_size")?,
            bits: s.get("tok.bits")?,
            hidden: s.get("tok.hidden")?,
            channels: 3,
        },
        epochs: s.get("tok.epochs")?,
        batch_size: s.get("tok.batch_size")?,
        lr: s.get("tok.lr")?,
        entropy_weight: s.get("tok.entropy_weight")?,
        commitment_weight: s.get("tok.commitment_weight")?,
        seed,
    };
    let vocab = Vocab::new(s.get("vocab.text_size")?, cfg.model.bits)?;
    let model_cfg = ModelConfig {
        d: s.get("model.d")?,
        n_layers: s.get("model.n_layers")?,
        n_heads: s.get("model.n_heads")?,
        max_seq_len: s.get("model.max_seq_len")?,
        vocab_size: vocab.total_size() as usize,
        ffn_mult: s.get("model.ffn_mult")?,
    };
    let model = ModelParams::<f32>::init(model_cfg, seed)?;
    let objects = load_objects(&s)?;
    let images: Vec<ImageGrid> = objects.iter().flat_map(|o| o.views.iter().cloned()).collect();

    let mut run = RunDir::create(&common.out, &s, "train-tokenizer")?;
    let trained = train_tokenizer_with(&images, &cfg, |_, _| {})?;
    let mut trace = String::from("epoch,loss\n");
    for (e, l) in trained.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{},{l:e}\n", e + 1));
    }
    run.write("tokenizer_trace.csv", trace.as_bytes())?;
    let tok = trained.tokenizer;
    let mut total = 0.0;
    for img in &images {
        total += psnr(img, &tok.reconstruct(img)?)?;
    }
    let mean_psnr = total / images.len() as f64;
    run.write(
        "report.txt",
        format!("images = {}\nmean_psnr_db = {mean_psnr}\n", images.len()).as_bytes(),
    )?;
    let ckpt = Checkpoint {
        vocab,
        tokenizer: Some(tok),
        model,
        optimizer: None,
        meta: CheckpointMeta {
            stage: 0,
            step: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
            config_echo: s.echo("train-tokenizer"),
        },
    };
    run.write("checkpoint.ckpt", &ckpt.to_bytes())?;
    println!("tokenizer reconstruction {mean_psnr:.2} dB over {} images", images.len());
    run.finish()
}

pub struct TrainFlags {
    pub stage: Option<u32>,
    pub ckpt: Option<String>,
    pub data: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
}

pub fn train(common: &Common, flags: TrainFlags) -> CliResult {
    let base = TrainConfig::new(Stage::Align);
    let adam = AdamWConfig::default();
    let defaults = [
        ("stage", String::new()),
        ("ckpt", String::new()),
        ("data", String::new()),
        ("split", "train".into()),
        ("steps", base.steps.to_string()),
        ("batch_size", base.batch_size.to_string()),
        ("base_lr", base.base_lr.to_string()),
        ("min_lr", base.min_lr.to_string()),
        ("warmup_steps", "auto".into()),
        ("beta1", adam.beta1.to_string()),
        ("beta2", adam.beta2.to_string()),
        ("eps", adam.eps.to_string()),
        ("weight_decay", adam.weight_decay.to_string()),
        ("clip_norm", base.clip_norm.to_string()),
        ("loss_weighting", "mean".into()),
        ("checkpoint_every", "0".into()),
    ];
    let all: Vec<(&'static str, &str)> = defaults.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut s = settings(common, &all)?;
    s.set_opt("stage", flags.stage)?;
    s.set_opt("ckpt", flags.ckpt)?;
    s.set_opt("data", flags.data)?;
    s.set_opt("steps", flags.steps)?;
    s.set_opt("batch_size", flags.batch_size)?;

    let stage = Stage::from_number(s.get("stage")?)?;
    let steps: usize = s.get("steps")?;
    let warmup = match s.raw("warmup_steps")? {
        "auto" => steps / 20,
        _ => s.get("warmup_steps")?,
    };
    let cfg = TrainConfig {
        stage,
        batch_size: s.get("batch_size")?,
        steps,
        base_lr: s.get("base_lr")?,
        warmup_steps: warmup,
        min_lr: s.get("min_lr")?,
        adam: AdamWConfig {
            beta1: s.get("beta1")?,
            beta2: s.get("beta2")?,
            eps: s.get("eps")?,
            weight_decay: s.get("weight_decay")?,
        },
        clip_norm: s.get("clip_norm")?,
        loss_weighting: match s.raw("loss_weighting")? {
            "mean" => LossWeighting::Mean,
            "inv_ratio" => LossWeighting::InvRatio,
            other => return Err(CliError::Config(format!("loss_weighting must be mean or inv_ratio, got {other:?}"))),
        },
        seed: s.get("seed")?,
        checkpoint_every: s.get("checkpoint_every")?,
    };
    cfg.validate()?;
    let input = load_checkpoint(s.required("ckpt")?)?;
    let mut run = RunDir::create(&common.out, &s, "train")?;

    if steps == 0 {
        run.write("trace.csv", format!("{TRACE_HEADER}\n").as_bytes())?;
        run.write("checkpoint.ckpt", &input.to_bytes())?;
        println!("0 steps: checkpoint passed through unchanged");
        return run.finish();
    }

    let tok = require_tokenizer(&input)?;
    let objects = load_objects(&s)?;
    let examples = stage_examples(stage, &input.vocab, tok, &objects)?;
    let mut state = TrainState::from_checkpoint(&input, &cfg);
    if state.step > 0 {
        println!("resuming stage {stage} at step {}", state.step);
    }
    let echo = s.echo("train");
    let trace_path = run.path("trace.csv");
    std::fs::write(&trace_path, format!("{TRACE_HEADER}\n")).map_err(|e| CliError::io(&trace_path, e))?;
    run.record("trace.csv");
    let snapshot = |state: &TrainState| Checkpoint {
        vocab: input.vocab,
        tokenizer: input.tokenizer.clone(),
        model: state.params.clone(),
        optimizer: Some(state.optimizer.clone()),
        meta: state.meta(&cfg, &echo),
    };
    let mut periodic = Vec::new();
    let records = orbitmask::trainer::train_stage(&examples, &mut state, &cfg, |rec, st| {
        append_trace_row(&trace_path, rec)?;
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.steps {
            let name = format!("checkpoint_step{:06}.ckpt", rec.step);
            let p = trace_path.with_file_name(&name);
            std::fs::write(&p, snapshot(st).to_bytes()).map_err(|e| Error::io(&p, e))?;
            periodic.push(name);
        }
        if rec.step % 100 == 0 || rec.step == cfg.steps {
            println!("stage {} step {}/{} lr {:.3e} loss {:.4}", rec.stage, rec.step, cfg.steps, rec.lr, rec.loss);
        }
        Ok(())
    });
    let records = match records {
        Ok(r) => r,
        Err(e @ Error::Numeric(_)) => {
            let dump = format!("{e}\nlast lr {:.6e}\n", lr_at(&cfg, state.step + 1));
            run.write("diagnostic.txt", dump.as_bytes())?;
            run.finish()?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    for p in &periodic {
        run.record(p);
    }
    run.write("checkpoint.ckpt", &snapshot(&state).to_bytes())?;
    if let Some(last) = records.last() {
        println!("final loss {:.4}", last.loss);
    }
    run.finish()
}

pub struct SampleFlags {
    pub task: Option<String>,
    pub ckpt: Option<String>,
    pub reference: Option<String>,
    pub prompt: Option<String>,
    pub desc: Option<String>,
    pub region: Option<String>,
    pub steps: Option<usize>,
    pub schedule: Option<String>,
    pub temperature: Option<f64>,
}

fn sampler_keys() -> Vec<(&'static str, &'static str)> {
    vec![("T", "20"), ("schedule", "cosine"), ("temperature", "1")]
}

fn sampler_config(s: &Settings) -> Result<SamplerConfig, CliError> {
    let cfg = SamplerConfig {
        steps: s.get("T")?,
        schedule: s.get::<Schedule>("schedule")?,
        temperature: s.get("temperature")?,
        seed: s.get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Patches containing any palette-coloured pixel.
fn auto_region(img: &ImageGrid, patch: usize) -> Vec<bool> {
    let (rows, cols) = (img.height() / patch, img.width() / patch);
    let mut region = vec![false; rows * cols];
    for r in 0..img.height() {
        for c in 0..img.width() {
            if palette_bin(img.pixel(r, c)).is_some() {
                region[(r / patch) * cols + c / patch] = true;
            }
        }
    }
    region
}

fn parse_region(spec: &str, img: &ImageGrid, patch: usize) -> Result<Vec<bool>, CliError> {
    if spec == "auto" {
        return Ok(auto_region(img, patch));
    }
    let parts: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("region {spec:?} is not `auto` or r0,c0,r1,c1")))?;
    let [r0, c0, r1, c1] = parts[..] else {
        return Err(CliError::Config(format!("region {spec:?} needs four numbers")));
    };
    let (rows, cols) = (img.height() / patch, img.width() / patch);
    if r0 >= r1 || c0 >= c1 || r1 > rows || c1 > cols {
        return Err(CliError::Config(format!("region {spec:?} outside the {rows}x{cols} patch grid")));
    }
    Ok((0..rows * cols)
        .map(|k| (r0..r1).contains(&(k / cols)) && (c0..c1).contains(&(k % cols)))
        .collect())
}

fn write_views(run: &mut RunDir, prefix: &str, images: &[ImageGrid]) -> CliResult {
    for (k, img) in images.iter().enumerate() {
        let rel = format!("{prefix}{k}.ppm");
        write_image(run.path(&rel), img)?;
        run.record(&rel);
    }
    Ok(())
}

pub fn sample(common: &Common, flags: SampleFlags) -> CliResult {
    let mut keys = vec![
        ("task", ""),
        ("ckpt", ""),
        ("ref", ""),
        ("prompt", ""),
        ("desc", ""),
        ("region", "auto"),
        ("resolution", "32"),
    ];
    keys.extend(sampler_keys());
    let mut s = settings(common, &keys)?;
    s.set_opt("task", flags.task)?;
    s.set_opt("ckpt", flags.ckpt)?;
    s.set_opt("ref", flags.reference)?;
    s.set_opt("prompt", flags.prompt)?;
    s.set_opt("desc", flags.desc)?;
    s.set_opt("region", flags.region)?;
    s.set_opt("T", flags.steps)?;
    s.set_opt("schedule", flags.schedule)?;
    s.set_opt("temperature", flags.temperature)?;
    let task = s.required("task")?.to_string();
    let cfg = sampler_config(&s)?;
    let ckpt = load_checkpoint(s.required("ckpt")?)?;
    let tok = require_tokenizer(&ckpt)?;
    let res: usize = s.get("resolution")?;
    let reference = match s.raw("ref")? {
        "" => None,
        p => Some(read_image(p)?),
    };
    let size = reference.as_ref().map(|r| (r.height(), r.width())).unwrap_or((res, res));
    let pipe = Pipeline {
        vocab: &ckpt.vocab,
        params: &ckpt.model,
        tokenizer: tok,
        image_size: size,
    };
    let prompt = |default: &str| -> String {
        match s.raw("prompt") {
            Ok("") | Err(_) => default.to_string(),
            Ok(p) => p.to_string(),
        }
    };
    let need_ref = || {
        reference
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("task {task} needs --ref <image.ppm>")))
    };
    let mut run = RunDir::create(&common.out, &s, "sample")?;
    match task.as_str() {
        "i2mv" | "t2mv" | "t2i" => {
            let out = match task.as_str() {
                "i2mv" => pipe.sample_i2mv(need_ref()?, &prompt(DEFAULT_I2MV_PROMPT), &cfg)?,
                "t2mv" => pipe.sample_t2mv(&prompt(DEFAULT_T2MV_PROMPT), s.required("desc")?, &cfg)?,
                _ => pipe.sample_t2i(s.required("desc")?, &cfg)?,
            };
            write_views(&mut run, "view", &out.images)?;
            let tokens: String = out
                .tokens
                .iter()
                .map(|t| t.iter().map(u32::to_string).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            run.write("tokens.txt", tokens.as_bytes())?;
            out.trace.write_csv(&run.path("trace.csv"))?;
            run.record("trace.csv");
        }
        "mmu" => {
            let (answer, trace) = pipe.sample_mmu(need_ref()?, &prompt(DEFAULT_MMU_PROMPT), &cfg)?;
            run.write("answer.txt", format!("{answer}\n").as_bytes())?;
            trace.write_csv(&run.path("trace.csv"))?;
            run.record("trace.csv");
            println!("{answer}");
        }
        "turnstyle" => {
            let scene = need_ref()?;
            let region = parse_region(s.raw("region")?, scene, tok.patch_size())?;
            let caption = match s.raw("desc")? {
                "" => "a scene".to_string(),
                d => d.to_string(),
            };
            let out = pipe.turnstyle(scene, &region, &caption, &cfg)?;
            write_image(run.path("reference.ppm"), &out.reference)?;
            run.record("reference.ppm");
            write_image(run.path("background.ppm"), &out.background)?;
            run.record("background.ppm");
            write_views(&mut run, "object_view", &out.object_views)?;
            write_views(&mut run, "composite", &out.composites)?;
        }
        other => {
            return Err(CliError::Config(format!(
                "task must be one of i2mv, t2mv, t2i, mmu, turnstyle; got {other:?}"
            )))
        }
    }
    run.finish()
}

fn eval_keys() -> Vec<(&'static str, &'static str)> {
    let mut keys = vec![("ckpt", ""), ("data", ""), ("split", "heldout"), ("max_objects", "0")];
    keys.extend(sampler_keys());
    keys
}

pub fn eval(
    common: &Common,
    ckpt: Option<String>,
    data: Option<String>,
    split: Option<String>,
    steps: Option<usize>,
) -> CliResult {
    let mut s = settings(common, &eval_keys())?;
    s.set_opt("ckpt", ckpt)?;
    s.set_opt("data", data)?;
    s.set_opt("split", split)?;
    s.set_opt("T", steps)?;
    let cfg = sampler_config(&s)?;
    let ckpt = load_checkpoint(s.required("ckpt")?)?;
    let tok = require_tokenizer(&ckpt)?;
    let objects = load_objects(&s)?;
    let first = objects[0].reference();
    let pipe = Pipeline {
        vocab: &ckpt.vocab,
        params: &ckpt.model,
        tokenizer: tok,
        image_size: (first.height(), first.width()),
    };
    let mut run = RunDir::create(&common.out, &s, "eval")?;
    let mut generated = Vec::with_capacity(objects.len());
    let mut rows = String::from("object_id,psnr,ssim,token_acc,consistency\n");
    let mut sums = [0.0; 4];
    for obj in &objects {
        let out = pipe.sample_i2mv(obj.reference(), DEFAULT_I2MV_PROMPT, &cfg)?;
        let targets = obj.i2mv_targets();
        let truth = targets
            .iter()
            .map(|v| ckpt.vocab.visual_ids(&tok.encode(v)?))
            .collect::<orbitmask::Result<Vec<_>>>()?;
        let mut p = 0.0;
        let mut q = 0.0;
        for (g, t) in out.images.iter().zip(&targets) {
            p += psnr(g, t)?;
            q += ssim(g, t)?;
        }
        let n = targets.len() as f64;
        let acc = token_accuracy(&out.tokens, &truth)?;
        let cons = match cross_view_consistency(&out.images) {
            Ok(c) => c,
            Err(Error::UndefinedView(_)) => 0.0,
            Err(e) => return Err(e.into()),
        };
        let vals = [p / n, q / n, acc, cons];
        rows.push_str(&format!("{},{},{},{},{}\n", obj.id(), vals[0], vals[1], vals[2], vals[3]));
        sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
        generated.push(out.images);
    }
    // Baseline: each object's generated views scored against the next object's renders.
    let mut baseline = 0.0;
    for (i, gen) in generated.iter().enumerate() {
        let other = objects[(i + 1) % objects.len()].i2mv_targets();
        for (g, t) in gen.iter().zip(&other) {
            baseline += psnr(g, t)? / other.len() as f64;
        }
    }
    let n = objects.len() as f64;
    let summary = format!(
        "objects = {}\nmean_psnr = {}\nmean_ssim = {}\nmean_token_acc = {}\nmean_consistency = {}\nshuffled_psnr = {}\n",
        objects.len(),
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        baseline / n
    );
    run.write("eval.csv", rows.as_bytes())?;
    run.write("summary.txt", summary.as_bytes())?;
    print!("{summary}");
    run.finish()
}

pub fn ablate(
    common: &Common,
    ckpt: Option<String>,
    data: Option<String>,
    split: Option<String>,
    steps: Option<usize>,
    seeds: Option<String>,
) -> CliResult {
    let mut keys = eval_keys();
    keys.push(("seeds", "0,1"));
    let mut s = settings(common, &keys)?;
    s.set_opt("ckpt", ckpt)?;
    s.set_opt("data", data)?;
    s.set_opt("split", split)?;
    s.set_opt("T", steps)?;
    s.set_opt("seeds", seeds)?;
    let cfg = sampler_config(&s)?;
    let seeds: Vec<u64> = s
        .required("seeds")?
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config("seeds must be comma-separated integers".into()))?;
    let ckpt = load_checkpoint(s.required("ckpt")?)?;
    let tok = require_tokenizer(&ckpt)?;
    let objects = load_objects(&s)?;
    let first = objects[0].reference();
    let pipe = Pipeline {
        vocab: &ckpt.vocab,
        params: &ckpt.model,
        tokenizer: tok,
        image_size: (first.height(), first.width()),
    };
    let mut run = RunDir::create(&common.out, &s, "ablate-schedule")?;
    let rows = ablate_schedules(&pipe, &objects, cfg.steps, cfg.temperature, &seeds)?;
    let csv = ablation_csv(&rows);
    run.write("ablation.csv", csv.as_bytes())?;
    print!("{csv}");
    run.finish()
}

pub fn inspect(common: &Common, ckpt: Option<String>) -> CliResult {
    let mut s = settings(common, &[("ckpt", "")])?;
    s.set_opt("ckpt", ckpt)?;
    let path = s.required("ckpt")?.to_string();
    let sections = read_sections(&path)?;
    let mut text = String::new();
    for sec in &sections {
        text.push_str(&format!("[{}] {} tensors\n", sec.name, sec.tensors.len()));
        for t in &sec.tensors {
            text.push_str(&format!("  {} {} {:?}\n", t.name, t.dtype.name(), t.dims));
        }
    }
    let ckpt = load_checkpoint(&path)?;
    text.push_str(&format!(
        "stage = {}\nstep = {}\nvocab = {} ids ({} text, {} visual)\nmodel_params = {}\ntokenizer = {}\n",
        ckpt.meta.stage,
        ckpt.meta.step,
        ckpt.vocab.total_size(),
        ckpt.vocab.text_size(),
        ckpt.vocab.visual_size(),
        ckpt.model.len(),
        if ckpt.tokenizer.is_some() { "yes" } else { "no" }
    ));
    let mut run = RunDir::create(&common.out, &s, "inspect-checkpoint")?;
    run.write("inspect.txt", text.as_bytes())?;
    print!("{text}");
    run.finish()
}
