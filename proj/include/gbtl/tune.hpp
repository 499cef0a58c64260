#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gbtl/corpus.hpp"
#include "gbtl/model.hpp"

namespace gbtl {

enum class OptimizerKind { adam, sgd };

std::string optimizer_kind_str(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& s);

struct TuneConfig {
  int epochs = 2;
  int batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  // Weight of the next-token language-model term added to the answer loss.
  // Zero for plain instruction tuning; positive when training the base model
  // so it also learns the corpus distribution (and can score perplexity).
  double lm_loss_weight = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FinetuneResult {
  ModelParams params;
  std::vector<double> epoch_mean_losses;  // one entry per epoch
};

// Answer-position cross-entropy training over the dataset, examples shuffled
// each epoch from the config seed, gradients averaged per batch. Aborts with
// a diagnostic if the loss stops being finite.
FinetuneResult finetune(const ModelParams& start, const Vocabulary& vocab,
                        const InstructionDataset& ds, const TuneConfig& config);

struct AccuracyReport {
  std::map<std::string, double> per_class;  // only classes present in the set
  std::map<std::string, int> class_counts;
  double overall = 0.0;
  int n_examples = 0;
};

// Restricted-argmax classification over assembled prompts. An empty trigger
// span evaluates the plain benign inputs.
AccuracyReport evaluate_accuracy(const ModelParams& params, const Vocabulary& vocab,
                                 const InstructionDataset& test_set,
                                 std::span<const int> trigger);

// Accuracy over the examples whose response differs from target_label,
// recomposed from the per-class numbers.
double non_target_accuracy(const AccuracyReport& report, const std::string& target_label);

// 1 - acc_poisoned / acc_benign. Undefined for a zero benign accuracy.
double pdr(double acc_benign, double acc_poisoned);

// Fraction of triggered non-target-class examples classified as the target.
double attack_success_rate(const ModelParams& params, const Vocabulary& vocab,
                           const InstructionDataset& test_set, std::span<const int> trigger,
                           const std::string& target_label);

// exp(mean next-token negative log-likelihood) over the id sequence.
double perplexity(const ModelParams& params, std::span<const int> token_ids);

struct StealthReport {
  double mean_benign_ppl = 0.0;
  double mean_triggered_ppl = 0.0;
  double ratio = 0.0;  // triggered / benign
};

// Mean prompt perplexity with and without the trigger appended, same scorer.
StealthReport stealth_report(const ModelParams& scorer, const Vocabulary& vocab,
                             std::span<const InstructionExample> samples,
                             std::span<const int> trigger);

// Everything one tuned model's evaluation produces, in one flat record.
struct EvalReport {
  std::string task;
  std::string target_label;
  std::string trigger_word;  // empty for a benign control arm
  double rate = 0.0;
  std::string label_mode;
  std::uint64_t master_seed = 0;
  std::string optimizer;
  double learning_rate = 0.0;

  std::map<std::string, double> clean_per_class;
  double clean_overall = 0.0;
  std::map<std::string, double> triggered_per_class;
  double triggered_overall = 0.0;

  double benign_reference_acc = 0.0;     // non-target clean accuracy, benign arm
  double triggered_non_target_acc = 0.0;
  double pdr_value = 0.0;
  double attack_success = 0.0;

  double mean_benign_ppl = 0.0;
  double mean_triggered_ppl = 0.0;
  double ppl_ratio = 0.0;
};

// Flat snake_case JSON; per-class accuracies become clean_acc_<label> /
// triggered_acc_<label> keys.
void save_eval_report(const EvalReport& report, const std::string& path);
EvalReport load_eval_report(const std::string& path);

// Fixed-column CSV for sweep aggregation; per-class numbers live in the JSON.
std::string eval_report_csv_header();
std::string eval_report_csv_row(const EvalReport& report);

}  // namespace gbtl
