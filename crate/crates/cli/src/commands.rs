//! Command implementations. Every command writes its resolved configuration
//! snapshot into the output directory before doing any long work, and all
//! randomness fans out from the run seed by component name.

use std::path::{Path, PathBuf};

use sidrec_core::data::{
    build_sequences, generate_synthetic, leave_one_out_split, load_interactions,
    save_interactions, validate_item_ids,
};
use sidrec_core::error::{Error, Result};
use sidrec_core::eval::{
    ablation_grid, evaluate, scaling_sweep, write_ablation_csv, write_metric_rows_csv,
    write_retrieval_csv, write_sweep_csv, write_sweep_plot_data, SweepSpec,
};
use sidrec_core::model::{to_path_examples, train, ModelParams, PathExample};
use sidrec_core::search::BeamConfig;
use sidrec_core::seed::SeedTree;
use sidrec_core::tensor::{load_tensors, save_tensors, Tensor};
use sidrec_core::tokenizer::{load_item_paths, save_item_paths, Codebook, PrefixTrie};

use crate::config::RunConfig;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.config.resolve(&self.out, p)
    }

    fn seeds(&self) -> SeedTree {
        SeedTree::new(self.config.seed)
    }

    fn write_snapshot(&self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let text = self.config.snapshot()?;
        std::fs::write(self.out.join(format!("resolved_{command}.toml")), text)?;
        Ok(())
    }
}

pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("synth")?;
    let data = generate_synthetic(&ctx.config.synth, ctx.seeds().seed("synthetic"))?;
    save_interactions(&ctx.path(&ctx.config.paths.interactions), &data.interactions)?;
    save_tensors(
        &ctx.path(&ctx.config.paths.embeddings),
        &[("item_embeddings", &data.item_embeddings)],
    )?;
    eprintln!(
        "synth: {} items, {} interactions",
        data.item_embeddings.shape()[0],
        data.interactions.len()
    );
    Ok(())
}

fn load_embeddings(ctx: &Ctx) -> Result<Tensor> {
    let path = ctx.path(&ctx.config.paths.embeddings);
    let tensors = load_tensors(&path)?;
    tensors
        .into_iter()
        .find(|(name, _)| name == "item_embeddings")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::data(format!("{} holds no item_embeddings", path.display())))
}

pub fn cmd_tokenize(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("tokenize")?;
    let embeddings = load_embeddings(ctx)?;
    let tk = &ctx.config.tokenizer;
    let (codebook, stats) = Codebook::fit_residual_kmeans(
        &embeddings,
        tk.m,
        tk.depth,
        ctx.seeds().seed("tokenizer"),
        tk.max_iters,
        tk.tol,
    )?;
    codebook.save(&ctx.path(&ctx.config.paths.codebook))?;
    let catalog = codebook.encode_all(&embeddings)?;
    save_item_paths(&ctx.path(&ctx.config.paths.item_paths), &catalog)?;

    let trie = PrefixTrie::build(&catalog, tk.depth)?;
    let stats_path = ctx.out.join("trie_stats.csv");
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&stats_path)?);
        writeln!(w, "level,valid_paths,mse")?;
        for b in 1..=tk.depth {
            writeln!(w, "{b},{},{}", trie.valid_count(b), stats.level_mse[b - 1])?;
        }
        w.flush()?;
    }
    eprintln!(
        "tokenize: fitted {}x{} codebook, {} distinct full paths",
        tk.depth,
        tk.m,
        trie.valid_count(tk.depth)
    );
    Ok(())
}

struct Prepared {
    catalog: Vec<sidrec_core::tokenizer::SemanticPath>,
    trie: PrefixTrie,
    train_examples: Vec<PathExample>,
    val_examples: Vec<PathExample>,
    test_examples: Vec<PathExample>,
}

fn prepare_dataset(ctx: &Ctx) -> Result<Prepared> {
    let catalog = load_item_paths(&ctx.path(&ctx.config.paths.item_paths))?;
    if catalog.is_empty() {
        return Err(Error::data("item-path map is empty; run tokenize first"));
    }
    let interactions = load_interactions(&ctx.path(&ctx.config.paths.interactions))?;
    validate_item_ids(&interactions, catalog.len())?;
    let sequences = build_sequences(&interactions);
    let split = leave_one_out_split(&sequences);
    let t_max = ctx.config.model.t_max;
    Ok(Prepared {
        trie: PrefixTrie::build(&catalog, ctx.config.tokenizer.depth)?,
        train_examples: to_path_examples(&split.train, &catalog, t_max)?,
        val_examples: to_path_examples(&split.validation, &catalog, t_max)?,
        test_examples: to_path_examples(&split.test, &catalog, t_max)?,
        catalog,
    })
}

fn check_compat(ctx: &Ctx, codebook: &Codebook) -> Result<()> {
    let model = &ctx.config.model;
    if codebook.size() != model.codebook_size || codebook.depth() != model.depth {
        return Err(Error::config(format!(
            "checkpoint/codebook mismatch: codebook is {}x{}, model expects {}x{}",
            codebook.depth(),
            codebook.size(),
            model.depth,
            model.codebook_size
        )));
    }
    Ok(())
}

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("train")?;
    let codebook = Codebook::load(&ctx.path(&ctx.config.paths.codebook))?;
    check_compat(ctx, &codebook)?;
    let data = prepare_dataset(ctx)?;
    eprintln!(
        "train: {} train / {} val / {} test examples over {} items",
        data.train_examples.len(),
        data.val_examples.len(),
        data.test_examples.len(),
        data.catalog.len()
    );
    let outcome = train(
        &ctx.config.model,
        &ctx.config.train,
        &data.train_examples,
        &data.val_examples,
        &data.trie,
        &ctx.seeds().subtree("train"),
    )?;
    outcome.params.save(&ctx.path(&ctx.config.paths.checkpoint))?;
    sidrec_core::model::write_log_csv(&ctx.out.join("train_log.csv"), &outcome.log)?;
    eprintln!(
        "train: {} steps, best validation recall {:.4}",
        outcome.steps_run, outcome.best_val_recall
    );
    Ok(())
}

fn load_model(ctx: &Ctx) -> Result<(ModelParams, Prepared)> {
    let codebook = Codebook::load(&ctx.path(&ctx.config.paths.codebook))?;
    check_compat(ctx, &codebook)?;
    let data = prepare_dataset(ctx)?;
    let params = ModelParams::load(&ctx.path(&ctx.config.paths.checkpoint), &ctx.config.model)?;
    if params.prm_table.shape()[0] != data.trie.total_valid_paths() {
        return Err(Error::config(format!(
            "checkpoint/catalog mismatch: reward table has {} rows, trie has {} valid paths",
            params.prm_table.shape()[0],
            data.trie.total_valid_paths()
        )));
    }
    Ok((params, data))
}

pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("eval")?;
    let (params, data) = load_model(ctx)?;
    let depth = ctx.config.model.depth;
    let guided_beam = ctx.config.search.beam_config(depth);
    let standard_beam = BeamConfig::all_off(guided_beam.k_prime, depth);
    let ks = &ctx.config.eval.ks;

    for (label, beam) in [("standard", &standard_beam), ("guided", &guided_beam)] {
        let run = evaluate(
            &params,
            &data.trie,
            &data.test_examples,
            beam,
            ks,
            ctx.workers,
        )?;
        write_metric_rows_csv(
            &ctx.out.join(format!("metrics_{label}.csv")),
            &run.metric_rows(beam.k_prime),
        )?;
        write_retrieval_csv(
            &ctx.out.join(format!("retrieval_{label}.csv")),
            &run.users,
            depth,
        )?;
        eprintln!(
            "eval[{label}]: hrecall {:?}, {} decode calls, {} skipped users",
            run.hrecall_by_depth, run.decode_calls, run.skipped_users
        );
    }
    Ok(())
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("sweep")?;
    let (params, data) = load_model(ctx)?;
    let depth = ctx.config.model.depth;
    let mut flags = ctx.config.search.prm_depths.clone();
    flags.resize(depth, false);
    let spec = SweepSpec {
        k_plus_values: ctx.config.eval.k_plus_list.clone(),
        k: ctx.config.search.k_prime,
        prm_depths: flags,
    };
    let rows = scaling_sweep(&params, &data.trie, &data.test_examples, &spec, ctx.workers)?;
    write_sweep_csv(&ctx.out.join("sweep.csv"), &rows)?;
    write_sweep_plot_data(&ctx.out, "sweep", &rows)?;
    eprintln!("sweep: {} candidate widths evaluated", rows.len());
    Ok(())
}

pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    ctx.write_snapshot("ablate")?;
    let (params, data) = load_model(ctx)?;
    let rows = ablation_grid(
        &params,
        &data.trie,
        &data.test_examples,
        ctx.config.search.k_prime,
        ctx.config.search.k_plus,
        ctx.workers,
    )?;
    write_ablation_csv(&ctx.out.join("ablation.csv"), &rows, ctx.config.search.k_plus)?;
    eprintln!("ablate: {} flag combinations evaluated", rows.len());
    Ok(())
}
