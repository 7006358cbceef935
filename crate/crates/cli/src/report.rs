//! The full experiment and the run report assembled from its artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use selfkd_core::eval::{profile_distance, AttentionProfile, EvalResult, MmAlignResult};
use selfkd_core::train::Stage;

use crate::commands::{EvalReport, ModalityArg, Run, SweepRow};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::layout::{model_tag, RunDir};

/// Eval and profile tags of the three compared models.
pub const BASE_TAG: &str = "base";
pub const SFT_TAG: &str = "sft";
pub const KD_TAG: &str = "selfkd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDistances {
    /// Upper-half Q→V distance of the SFT model's audio profile from the base text profile.
    pub sft_vs_base: f64,
    pub selfkd_vs_base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub train_logs: BTreeMap<String, String>,
    /// Audio-aligned checkpoint before any vision-audio training.
    pub base: EvalReport,
    pub sft: EvalReport,
    pub selfkd: EvalReport,
    pub mmalign: BTreeMap<String, MmAlignResult>,
    pub profiles: BTreeMap<String, String>,
    pub profile_distance: ProfileDistances,
    pub ablation: Vec<SweepRow>,
    /// Not covered by `checksums`: timings differ between identical runs.
    pub wall_clock_s: BTreeMap<String, f64>,
    pub checksums: BTreeMap<String, String>,
}

impl Run {
    fn sft_tag(&self) -> String {
        model_tag(Stage::VisionAudioSft, Some(self.config.report.sft_alpha))
    }

    fn kd_tag(&self) -> String {
        model_tag(Stage::VisionAudioSft, Some(self.config.report.kd_alpha))
    }

    /// Checkpoint tags whose train logs the report references.
    fn trained_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .config
            .stages
            .iter()
            .map(|p| p.config.stage)
            .filter(|&s| s != Stage::VisionAudioSft)
            .map(|s| model_tag(s, None))
            .collect();
        tags.extend(self.config.report.alphas.iter().map(|&a| model_tag(Stage::VisionAudioSft, Some(a))));
        tags
    }

    /// Every artifact a complete run must contain.
    pub fn expected_artifacts(&self) -> Vec<String> {
        let mut out = vec![RunDir::config_rel(), RunDir::manifest_rel()];
        out.extend(self.dataset_kinds().into_iter().map(RunDir::dataset_rel));
        for tag in self.trained_tags() {
            out.push(RunDir::checkpoint_rel(&tag));
            out.push(RunDir::log_rel(&tag));
            out.push(RunDir::log_json_rel(&tag));
        }
        for tag in [BASE_TAG, SFT_TAG, KD_TAG] {
            out.push(RunDir::eval_rel(tag));
            out.push(RunDir::profile_csv_rel(tag));
            out.push(RunDir::profile_json_rel(tag));
        }
        out.push(RunDir::sweep_rel());
        out.push(RunDir::sweep_json_rel());
        out
    }

    /// Evaluations and attention probes of the base, SFT and Self-KD models.
    pub fn evaluate_models(&self) -> Result<()> {
        let vqa = self.config.eval.vqa;
        let n = self.config.eval.profile_samples;
        let base = RunDir::checkpoint_rel(&model_tag(Stage::AudioTextAlign, None));
        self.eval(&base, vqa, ModalityArg::Both, BASE_TAG)?;
        self.probe_attention(&base, vqa, ModalityArg::Both, n, BASE_TAG)?;
        for (ck, tag) in [(self.sft_tag(), SFT_TAG), (self.kd_tag(), KD_TAG)] {
            let ck = RunDir::checkpoint_rel(&ck);
            self.eval(&ck, vqa, ModalityArg::Both, tag)?;
            self.probe_attention(&ck, vqa, ModalityArg::Audio, n, tag)?;
        }
        Ok(())
    }

    /// Data generation, all stages, the α sweep, evaluation and the report.
    pub fn run_experiment(&self) -> Result<RunReport> {
        self.gen_data()?;
        self.train_prestages()?;
        self.ablate(&self.config.report.alphas)?;
        self.evaluate_models()?;
        self.report()
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let path = self.dir.path(rel);
        let text = fs::read_to_string(&path).map_err(|_| CliError::Corrupt(vec![path.clone()]))?;
        serde_json::from_str(&text).map_err(|_| CliError::Corrupt(vec![path]))
    }

    /// Validates the run directory and writes `report/`.
    pub fn report(&self) -> Result<RunReport> {
        let expected = self.expected_artifacts();
        let bad = self.dir.verify(&expected)?;
        if !bad.is_empty() {
            return Err(CliError::Corrupt(bad));
        }
        let index = self.dir.index()?;
        let stale = self.dir.verify(&index.keys().cloned().collect::<Vec<_>>())?;
        if !stale.is_empty() {
            return Err(CliError::Corrupt(stale));
        }
        let base: EvalReport = self.read_json(&RunDir::eval_rel(BASE_TAG))?;
        let sft: EvalReport = self.read_json(&RunDir::eval_rel(SFT_TAG))?;
        let selfkd: EvalReport = self.read_json(&RunDir::eval_rel(KD_TAG))?;
        let profile = |tag: &str, modality: &str| -> Result<AttentionProfile> {
            let rel = RunDir::profile_json_rel(tag);
            let all: Vec<AttentionProfile> = self.read_json(&rel)?;
            all.into_iter().find(|p| p.modality == modality).ok_or_else(|| CliError::Corrupt(vec![self.dir.path(&rel)]))
        };
        let base_text = profile(BASE_TAG, "text")?;
        let distance = |tag: &str| -> Result<f64> { Ok(profile_distance(&profile(tag, "audio")?, &base_text, None)?) };
        let distances = ProfileDistances { sft_vs_base: distance(SFT_TAG)?, selfkd_vs_base: distance(KD_TAG)? };
        let ablation: Vec<SweepRow> = self.read_json(&RunDir::sweep_json_rel())?;
        let mut mmalign = BTreeMap::new();
        for (tag, r) in [(SFT_TAG, &sft), (KD_TAG, &selfkd)] {
            let m = r.mmalign.get("audio").ok_or_else(|| CliError::Corrupt(vec![self.dir.path(&RunDir::eval_rel(tag))]))?;
            mmalign.insert(tag.to_string(), m.clone());
        }
        let report = RunReport {
            config: self.config.clone(),
            train_logs: self.trained_tags().into_iter().map(|t| (t.clone(), RunDir::log_rel(&t))).collect(),
            mmalign,
            profiles: [BASE_TAG, SFT_TAG, KD_TAG].iter().map(|t| (t.to_string(), RunDir::profile_csv_rel(t))).collect(),
            profile_distance: distances,
            ablation,
            wall_clock_s: self.dir.timings(),
            checksums: index,
            base,
            sft,
            selfkd,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        self.dir.write_plain("report/report.json", json.as_bytes())?;
        self.dir.write_plain("report/table1.csv", gap_table_csv(&report)?.as_bytes())?;
        self.dir.write_plain("report/table2.csv", comparison_csv(&report).as_bytes())?;
        self.dir.write_plain("report/summary.md", summary(&report)?.as_bytes())?;
        Ok(report)
    }
}

fn gap(r: &EvalReport) -> Result<&EvalResult> {
    r.gap.as_ref().ok_or_else(|| CliError::Corrupt(vec![r.checkpoint.clone().into()]))
}

fn models(report: &RunReport) -> [(&'static str, &EvalReport); 3] {
    [(BASE_TAG, &report.base), (SFT_TAG, &report.sft), (KD_TAG, &report.selfkd)]
}

/// Rows `model,task,text,audio,gap`, one per task plus an average row.
pub fn gap_table_csv(report: &RunReport) -> Result<String> {
    let mut out = String::from("model,task,text,audio,gap\n");
    for (name, r) in models(report) {
        let g = gap(r)?;
        for (task, t) in &g.tasks {
            let _ = writeln!(out, "{name},{task},{:.2},{:.2},{:.2}", t.text, t.audio, t.gap);
        }
        let _ = writeln!(out, "{name},average,{:.2},{:.2},{:.2}", g.text_average, g.audio_average, g.gap_average);
    }
    Ok(out)
}

/// Audio-query accuracy of SFT vs Self-KD per task, then MMAlign.
pub fn comparison_csv(report: &RunReport) -> String {
    let mut out = String::from("metric,sft,selfkd\n");
    let (s, k) = (&report.sft.accuracy["audio"], &report.selfkd.accuracy["audio"]);
    for (task, v) in s {
        let _ = writeln!(out, "{task},{:.2},{:.2}", v.accuracy, k.get(task).map_or(f64::NAN, |x| x.accuracy));
    }
    let _ = writeln!(out, "average,{:.2},{:.2}", report.sft.average["audio"], report.selfkd.average["audio"]);
    let (ms, mk) = (&report.mmalign[SFT_TAG], &report.mmalign[KD_TAG]);
    let _ = writeln!(out, "mmalign_relation,{:.2},{:.2}", ms.relation, mk.relation);
    let _ = writeln!(out, "mmalign_attribute,{:.2},{:.2}", ms.attribute, mk.attribute);
    let _ = writeln!(out, "mmalign_average,{:.2},{:.2}", ms.average, mk.average);
    out
}

pub fn summary(report: &RunReport) -> Result<String> {
    let mut out = String::from("# Run summary\n\n## Text vs audio queries\n\n");
    out.push_str("| model | task | text | audio | gap |\n|---|---|---:|---:|---:|\n");
    for (name, r) in models(report) {
        let g = gap(r)?;
        for (task, t) in &g.tasks {
            let _ = writeln!(out, "| {name} | {task} | {:.2} | {:.2} | {:.2} |", t.text, t.audio, t.gap);
        }
        let _ = writeln!(out, "| {name} | **average** | {:.2} | {:.2} | {:.2} |", g.text_average, g.audio_average, g.gap_average);
    }
    out.push_str("\n## SFT vs Self-KD (audio queries)\n\n| metric | SFT | Self-KD |\n|---|---:|---:|\n");
    for line in comparison_csv(report).lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} | {} | {} |", cells[0], cells[1], cells[2]);
    }
    let b = &report.base.bias;
    let _ = writeln!(out, "\n## Yes-ratio (base model)\n\nground truth {:.3}", b.ground_truth_yes);
    for (m, v) in &b.predicted {
        let _ = writeln!(out, "- {m}: {:.3} ({} unparsed)", v.predicted_yes, v.unparsed);
    }
    let d = &report.profile_distance;
    let _ = writeln!(
        out,
        "\n## Q->V attention distance from the base text profile (upper layers)\n\n- SFT: {:.5}\n- Self-KD: {:.5}",
        d.sft_vs_base, d.selfkd_vs_base
    );
    out.push_str("\n## KD ratio sweep (audio average)\n\n| alpha | average |\n|---:|---:|\n");
    for r in &report.ablation {
        let _ = writeln!(out, "| {} | {:.2} |", r.alpha, r.average);
    }
    Ok(out)
}
