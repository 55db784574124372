//! One function per subcommand. Each returns the files it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sharc::gallery::{embed_all, read_manifest, register, save_index, load_index, write_manifest, TrackletRecord};
use sharc::losses::{trace_csv, train_toy};
use sharc::matcher::{appearance_scores, fuse_scores, shape_scores, ScoreMatrix};
use sharc::metrics::{evaluate, Unmatchable};
use sharc::model::Model;
use sharc::synth::{generate_dataset, generate_records, load_tracklets, split_protocol, toy_samples};

use crate::config::LoadedConfig;
use crate::error::CliError;

pub const GAMMA_SWEEP: [f64; 4] = [1.0, 0.2, 0.1, 0.0];
pub const ALPHA_SWEEP: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.4];

pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const PER_QUERY_FILE: &str = "per_query_ap.csv";
pub const GAMMA_TABLE_FILE: &str = "ablate_gamma.csv";
pub const ALPHA_TABLE_FILE: &str = "ablate_alpha.csv";
pub const TRACE_FILE: &str = "toy_trace.csv";
pub const TOY_SUMMARY_FILE: &str = "toy_summary.txt";

/// Writes `# <header>` followed by `body`, creating parent directories.
fn write_text(path: &Path, header: &str, body: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))?;
    }
    fs::write(path, format!("# {header}\n{body}")).map_err(|e| CliError::from_io(path, e))?;
    Ok(path.to_owned())
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_owned()))
    }
}

fn load(path: &Path) -> Result<Vec<TrackletRecord<f64>>, CliError> {
    require(path)?;
    Ok(load_tracklets(path)?)
}

fn model(cfg: &LoadedConfig) -> Result<Model<f64>, CliError> {
    Ok(Model::new(&cfg.config.model, cfg.config.ablation)?)
}

pub fn synth(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = cfg.data_dir();
    let rows = generate_dataset(&cfg.config.dataset, &dir)?;
    let split = &cfg.config.split;
    let (gallery, query) = split_protocol(&rows, split.query_ratio, split.seed)?;
    let header = cfg.header();
    let mut written = Vec::new();
    for (name, set) in [("manifest.csv", &rows), ("gallery.csv", &gallery), ("query.csv", &query)] {
        let path = dir.join(name);
        write_manifest(&path, set, Some(&header))?;
        written.push(path);
    }
    println!("synth: {} tracklets, {} gallery, {} query", rows.len(), gallery.len(), query.len());
    Ok(written)
}

pub fn enroll(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let gallery = load(&cfg.gallery_manifest())?;
    let index = register(&gallery, &model(cfg)?, cfg.config.registration())?;
    let path = cfg.index_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))?;
    }
    save_index(&index, &path)?;
    println!("enroll: {} entries from {} tracklets", index.len(), gallery.len());
    Ok(vec![path])
}

/// Per-modality score matrices before fusion, with gallery columns per
/// index entry.
pub struct ModalityScores {
    pub shape: ScoreMatrix<f64>,
    pub appearance: ScoreMatrix<f64>,
}

impl ModalityScores {
    /// Fused scores with one column per subject.
    pub fn fused(&self, alpha: f64) -> Result<ScoreMatrix<f64>, CliError> {
        Ok(fuse_scores(&self.shape, &self.appearance, alpha)?.collapse_max())
    }
}

fn score_queries(
    cfg: &LoadedConfig,
    model: &Model<f64>,
    index: &sharc::gallery::GalleryIndex<f64>,
    queries: &[TrackletRecord<f64>],
) -> Result<ModalityScores, CliError> {
    let embedded = embed_all(model, queries)?;
    let fusion = &cfg.config.fusion;
    Ok(ModalityScores {
        shape: shape_scores(&embedded, index, fusion.shape_scoring)?,
        appearance: appearance_scores(&embedded, index, fusion.appearance_scoring)?,
    })
}

pub fn query(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let index_path = cfg.index_path();
    require(&index_path)?;
    let index = load_index::<f64>(&index_path)?;
    let queries = load(&cfg.query_manifest())?;
    let scores = score_queries(cfg, &model(cfg)?, &index, &queries)?.fused(cfg.config.fusion.alpha)?;
    let mut body = Vec::new();
    scores.write_csv(&mut body).map_err(|e| CliError::Other(e.to_string()))?;
    let path = write_text(
        &cfg.output_dir().join(SCORES_FILE),
        &cfg.header(),
        &String::from_utf8(body).expect("score table is UTF-8"),
    )?;
    println!("query: {} queries against {} subjects", scores.rows(), scores.cols());
    Ok(vec![path])
}

/// Subject label of every query tracklet, in score-row order.
fn query_labels(cfg: &LoadedConfig, query_ids: &[String]) -> Result<Vec<String>, CliError> {
    let manifest = cfg.query_manifest();
    require(&manifest)?;
    let subjects: BTreeMap<String, String> =
        read_manifest(&manifest)?.into_iter().map(|r| (r.tracklet_id, r.subject_id)).collect();
    query_ids
        .iter()
        .map(|id| {
            subjects.get(id).cloned().ok_or_else(|| {
                CliError::Other(format!("query {id} is not listed in {}", manifest.display()))
            })
        })
        .collect()
}

pub fn evaluate_cmd(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let scores_path = cfg.output_dir().join(SCORES_FILE);
    require(&scores_path)?;
    let text = fs::read_to_string(&scores_path).map_err(|e| CliError::from_io(&scores_path, e))?;
    let scores = ScoreMatrix::<f64>::read_csv(text.as_bytes())?;
    let labels = query_labels(cfg, &scores.query_ids)?;
    let report = evaluate(&scores, &labels, cfg.config.eval.unmatchable)?;
    let out = cfg.output_dir();
    let header = cfg.header();
    let written = vec![
        write_text(&out.join(REPORT_FILE), &header, &report.to_key_values())?,
        write_text(&out.join(PER_QUERY_FILE), &header, &report.per_query_csv())?,
    ];
    print!("{}", report.to_key_values());
    Ok(written)
}

fn rank1(scores: &ScoreMatrix<f64>, labels: &[String], policy: Unmatchable) -> Result<f64, CliError> {
    Ok(evaluate(scores, labels, policy)?.rank1())
}

/// Trims a decimal to at most two places without trailing zeros.
fn fmt_weight(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_owned()
    }
}

fn fmt_rank(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn row(label: &str, cells: impl IntoIterator<Item = String>) -> String {
    let mut s = label.to_owned();
    for c in cells {
        s.push(',');
        s.push_str(&c);
    }
    s.push('\n');
    s
}

/// Table with an `App.` row, a `Shape` row and a `Rank 1` row (percent).
pub fn alpha_table(scores: &ModalityScores, labels: &[String], policy: Unmatchable) -> Result<String, CliError> {
    let mut ranks = Vec::with_capacity(ALPHA_SWEEP.len());
    for &alpha in &ALPHA_SWEEP {
        ranks.push(rank1(&scores.fused(alpha)?, labels, policy)?);
    }
    let mut s = String::new();
    s.push_str(&row("App.", ALPHA_SWEEP.iter().map(|a| fmt_weight(1.0 - a))));
    s.push_str(&row("Shape", ALPHA_SWEEP.iter().map(|&a| fmt_weight(a))));
    s.push_str(&row("Rank 1", ranks.into_iter().map(fmt_rank)));
    Ok(s)
}

struct Evaluation {
    model: Model<f64>,
    gallery: Vec<TrackletRecord<f64>>,
    queries: Vec<TrackletRecord<f64>>,
    labels: Vec<String>,
}

impl Evaluation {
    fn load(cfg: &LoadedConfig) -> Result<Self, CliError> {
        let gallery = load(&cfg.gallery_manifest())?;
        let queries = load(&cfg.query_manifest())?;
        let labels = queries.iter().map(|q| q.subject_id.clone()).collect();
        Ok(Self { model: model(cfg)?, gallery, queries, labels })
    }

    fn scores(&self, cfg: &LoadedConfig, model: &Model<f64>) -> Result<ModalityScores, CliError> {
        let index = register(&self.gallery, model, cfg.config.registration())?;
        score_queries(cfg, model, &index, &self.queries)
    }
}

pub fn ablate_alpha(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let run = Evaluation::load(cfg)?;
    let scores = run.scores(cfg, &run.model)?;
    let table = alpha_table(&scores, &run.labels, cfg.config.eval.unmatchable)?;
    print!("{table}");
    Ok(vec![write_text(&cfg.output_dir().join(ALPHA_TABLE_FILE), &cfg.header(), &table)?])
}

/// Appearance-only and fused rank-1 for every gamma of the sweep.
pub fn ablate_gamma(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let run = Evaluation::load(cfg)?;
    let policy = cfg.config.eval.unmatchable;
    let mut appearance = Vec::new();
    let mut fused = Vec::new();
    for &gamma in &GAMMA_SWEEP {
        let scores = run.scores(cfg, &run.model.with_gamma(gamma)?)?;
        appearance.push(rank1(&scores.appearance.collapse_max(), &run.labels, policy)?);
        fused.push(rank1(&scores.fused(cfg.config.fusion.alpha)?, &run.labels, policy)?);
    }
    let mut table = String::new();
    table.push_str(&row("Gamma", GAMMA_SWEEP.iter().map(|g| g.to_string())));
    table.push_str(&row("Rank 1", appearance.into_iter().map(fmt_rank)));
    table.push_str(&row("Fused rank 1", fused.into_iter().map(fmt_rank)));
    print!("{table}");
    Ok(vec![write_text(&cfg.output_dir().join(GAMMA_TABLE_FILE), &cfg.header(), &table)?])
}

pub fn train_toy_cmd(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let train = &cfg.config.train;
    let records: Vec<TrackletRecord<f64>> = generate_records(&train.dataset(&cfg.config.dataset))?;
    let (x, y) = toy_samples(&records)?;
    let run = train_toy(&x, &y, &train.toy_config())?;
    let out = cfg.output_dir();
    let header = cfg.header();
    let first = run.trace[0];
    let last = *run.trace.last().expect("at least one step");
    let mut summary = String::new();
    let _ = writeln!(summary, "steps={}", run.trace.len());
    let _ = writeln!(summary, "initial_loss={first}");
    let _ = writeln!(summary, "final_loss={last}");
    if let Some(err) = run.gradient_error {
        let _ = writeln!(summary, "gradient_error={err}");
    }
    print!("{summary}");
    Ok(vec![
        write_text(&out.join(TRACE_FILE), &header, &trace_csv(&run.trace))?,
        write_text(&out.join(TOY_SUMMARY_FILE), &header, &summary)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use sharc::math::Matrix;

    fn matrix(rows: &[&[f64]], gallery: &[&str]) -> ScoreMatrix<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        ScoreMatrix::new(
            Matrix::from_rows(&rows).unwrap(),
            (0..rows.len()).map(|i| format!("q{i}")).collect(),
            gallery.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn weights_format_like_the_table() {
        let app: Vec<String> = ALPHA_SWEEP.iter().map(|a| fmt_weight(1.0 - a)).collect();
        assert_eq!(app, ["0.95", "0.9", "0.8", "0.7", "0.6"]);
        assert_eq!(fmt_weight(1.0), "1");
        assert_eq!(fmt_weight(0.0), "0");
        assert_eq!(fmt_rank(0.914), "91.4");
    }

    #[test]
    fn identical_modalities_give_flat_alpha_row() {
        let m = matrix(&[&[0.9, 0.2, 0.4], &[0.1, 0.3, 0.8], &[0.5, 0.6, 0.1]], &["a", "b", "c"]);
        let scores = ModalityScores { shape: m.clone(), appearance: m };
        let labels: Vec<String> = ["a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let table = alpha_table(&scores, &labels, Unmatchable::Fail).unwrap();
        assert_eq!(table, "App.,0.95,0.9,0.8,0.7,0.6\nShape,0.05,0.1,0.2,0.3,0.4\nRank 1,66.7,66.7,66.7,66.7,66.7\n");
    }
}
