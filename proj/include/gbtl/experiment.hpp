#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gbtl/corpus.hpp"
#include "gbtl/model.hpp"
#include "gbtl/poison.hpp"
#include "gbtl/trigger.hpp"
#include "gbtl/tune.hpp"

namespace gbtl {

// One run's complete configuration. Assembled from built-in defaults, then a
// config file, then command-line overrides; the final text is snapshotted in
// the run manifest so every report is self-describing.
//
// model.vocab_size and model.seed are filled in when the vocabulary is built;
// the stage seeds all derive from master_seed (see derive_seed), so a run is
// a pure function of this struct.
struct ExperimentConfig {
  TaskKind task = TaskKind::sentiment;
  int train_size = 4000;
  int test_size = 500;
  int k_classes = 4;  // domain task only

  ModelConfig model;
  GbtlConfig gbtl;
  PoisonPolicy poison;
  TuneConfig tune;  // instruction tuning, both arms
  TuneConfig base;  // base-model training; keeps a language-model loss term

  std::string out_dir = "runs/default";
  std::uint64_t master_seed = 1;

  void validate() const;
};

ExperimentConfig default_experiment_config();

// Flat sectioned key = value text, '#' comments. Unknown keys are errors.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

// Serializes every field, defaults included. parse(to_string(c)) == c.
std::string config_to_string(const ExperimentConfig& config);

// Prefixes a relative out_dir with $GBTL_OUT_ROOT when the variable is set.
std::string resolve_out_dir(const std::string& out_dir);

// Per-run bookkeeping at <out_dir>/manifest.json: the config snapshot, the
// produced artifacts with content hashes, and stage completion. Stages check
// the hash of everything they consume, so a hand-edited or regenerated
// artifact fails loudly instead of silently skewing downstream numbers.
struct RunManifest {
  std::string version = kToolVersion;
  std::string config_text;
  std::map<std::string, std::string> artifact_paths;  // name -> path relative to out_dir
  std::map<std::string, std::uint64_t> artifact_hashes;
  std::vector<std::string> completed_stages;  // in completion order

  void record_artifact(const std::string& out_dir, const std::string& name,
                       const std::string& relative_path);
  // Verifies existence and content hash; returns the absolute-ish joined path.
  std::string checked_path(const std::string& out_dir, const std::string& name) const;
  bool completed(const std::string& stage) const;
  void mark_completed(const std::string& stage);
};

void save_manifest(const RunManifest& manifest, const std::string& out_dir);
RunManifest load_manifest(const std::string& out_dir);

std::uint64_t hash_file(const std::string& path);

// A learned or baseline trigger with its provenance and search history.
struct TriggerRecord {
  std::string method;  // "gbtl", "random" or "fixed"
  std::string word;
  std::vector<int> token_ids;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // batch loss on the learning prompts
  std::vector<double> loss_trace;
};

void save_trigger_record(const TriggerRecord& record, const std::string& path);
TriggerRecord load_trigger_record(const std::string& path);

// Pipeline stages. Each loads what it needs through the manifest, writes its
// artifacts under config.out_dir and marks itself completed. Names of the
// stages double as seed-derivation labels.

// Writes train.jsonl, test.jsonl and vocab.json.
void cmd_gen_data(const ExperimentConfig& config);

// Trains the base model on the benign training set (answer loss plus the
// config.base language-model term) and writes base.ckpt plus its benign
// evaluation, base_eval.json.
EvalReport cmd_train_base(const ExperimentConfig& config);

// Runs the trigger search against the base checkpoint; writes trigger.json.
TriggerRecord cmd_learn_trigger(const ExperimentConfig& config);

// Control trigger: a seeded random eligible token, or a fixed word that must
// be in the vocabulary and eligible. Writes baseline_trigger.json.
TriggerRecord cmd_baseline_trigger(const ExperimentConfig& config, const std::string& mode,
                                   const std::string& word);

// Poisons the training set with the learned trigger at config.poison.rate;
// writes poisoned.jsonl and poison_indices.json.
PoisonRecord cmd_poison(const ExperimentConfig& config);

// Fine-tunes from the base checkpoint and evaluates. The benign arm tunes on
// the clean training set and is its own reference (PDR 0 by construction);
// it writes benign.ckpt + benign_eval.json. The poisoned arm requires the
// benign arm, tunes on poisoned.jsonl, scores stealth under the benign-tuned
// model and writes poisoned.ckpt + eval.json.
EvalReport cmd_finetune_eval(const ExperimentConfig& config, bool benign_arm);

// One poison+tune+eval per rate, reusing this run's base model, trigger and
// benign reference so rows differ only in the rate. Rate 0 reproduces the
// benign control row. Per-rate failures are recorded in the table and the
// sweep continues. Writes sweep.csv and per-rate report JSONs.
void cmd_sweep(const ExperimentConfig& config, std::vector<double> rates);

// Consolidates finished runs into one grid (markdown + CSV). PDR cells are
// recomputed from the stored accuracies and must agree to 1e-9; runs with
// missing artifacts get absent cells rather than failing the report.
void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_path_base);

}  // namespace gbtl
