#include "gbtl/tune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gbtl/rng.hpp"
#include "gbtl/tensor.hpp"
#include "json.hpp"

namespace gbtl {

std::string optimizer_kind_str(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  fail_invalid("unknown optimizer '" + s + "' (expected adam or sgd)");
}

void TuneConfig::validate() const {
  require(epochs >= 1, "tune config: epochs must be >= 1");
  require(batch_size >= 1, "tune config: batch_size must be >= 1");
  require(learning_rate >= 0.0, "tune config: learning rate must be >= 0");
  require(lm_loss_weight >= 0.0, "tune config: lm_loss_weight must be >= 0");
}

namespace {

struct EncodedExample {
  std::vector<int> ids;
  int target = -1;
};

std::vector<EncodedExample> encode_dataset(const ModelParams& params, const Vocabulary& vocab,
                                           const InstructionDataset& ds) {
  std::vector<EncodedExample> out;
  out.reserve(ds.examples.size());
  for (const InstructionExample& ex : ds.examples) {
    EncodedExample enc;
    enc.ids = assemble_prompt(vocab, ex, {}, params.config.max_seq_len);
    enc.target = vocab.id_of(ex.response);
    require(enc.target != Vocabulary::kUnk,
            "finetune: response word '" + ex.response + "' is not in the vocabulary");
    out.push_back(std::move(enc));
  }
  return out;
}

Tensor example_loss(const ModelParams& params, const EncodedExample& ex, double lm_weight) {
  if (lm_weight == 0.0) {
    return cross_entropy(answer_logits_fast(params, ex.ids), ex.target);
  }
  const int t = static_cast<int>(ex.ids.size());
  Tensor logits = forward(params, ex.ids);
  Tensor answer = cross_entropy(take_row(logits, t - 1), ex.target);
  std::vector<int> next(ex.ids.begin() + 1, ex.ids.end());
  Tensor lm = sequence_cross_entropy(slice_rows(logits, 0, t - 1), next);
  return add(answer, scale(lm, lm_weight));
}

// One optimizer step from the summed leaf gradients; scale turns sums into
// batch means.
struct Optimizer {
  const TuneConfig& config;
  std::vector<std::vector<Scalar>> m, v;
  long step = 0;

  explicit Optimizer(const TuneConfig& cfg, const std::vector<Tensor>& tensors) : config(cfg) {
    if (config.optimizer == OptimizerKind::adam) {
      for (const Tensor& t : tensors) {
        m.emplace_back(t.size(), 0.0);
        v.emplace_back(t.size(), 0.0);
      }
    }
  }

  void apply(std::vector<Tensor>& tensors, double scale) {
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    ++step;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
      Tensor& t = tensors[ti];
      if (!t.has_grad()) continue;
      auto vals = t.mutable_values();
      std::span<const Scalar> g = t.grad();
      if (config.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < vals.size(); ++i) {
          vals[i] -= config.learning_rate * g[i] * scale;
        }
        continue;
      }
      std::vector<Scalar>& mi = m[ti];
      std::vector<Scalar>& vi = v[ti];
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double gi = g[i] * scale;
        mi[i] = kBeta1 * mi[i] + (1.0 - kBeta1) * gi;
        vi[i] = kBeta2 * vi[i] + (1.0 - kBeta2) * gi * gi;
        vals[i] -= config.learning_rate * (mi[i] / bc1) / (std::sqrt(vi[i] / bc2) + kEps);
      }
    }
  }
};

}  // namespace

FinetuneResult finetune(const ModelParams& start, const Vocabulary& vocab,
                        const InstructionDataset& ds, const TuneConfig& config) {
  config.validate();
  require(!ds.examples.empty(), "finetune: empty dataset");

  FinetuneResult result;
  result.params = start.clone();
  std::vector<Tensor> tensors = result.params.tensors();
  const std::vector<EncodedExample> encoded = encode_dataset(result.params, vocab, ds);

  Optimizer opt(config, tensors);
  Rng rng(config.seed);
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
      result.params.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = at; i < end; ++i) {
        Tape tape;
        Tensor loss = example_loss(result.params, encoded[order[i]], config.lm_loss_weight);
        batch_loss += loss.item();
        tape.backward(loss);
      }
      if (!std::isfinite(batch_loss)) {
        fail_runtime("finetune: loss diverged at epoch " + std::to_string(epoch + 1));
      }
      epoch_loss += batch_loss;
      opt.apply(tensors, 1.0 / static_cast<double>(end - at));
    }
    result.params.zero_grad();
    result.epoch_mean_losses.push_back(epoch_loss / static_cast<double>(encoded.size()));
  }
  return result;
}

AccuracyReport evaluate_accuracy(const ModelParams& params, const Vocabulary& vocab,
                                 const InstructionDataset& test_set,
                                 std::span<const int> trigger) {
  require(!test_set.examples.empty(), "evaluate_accuracy: empty test set");
  const std::vector<int> label_ids = label_token_ids(vocab, test_set);

  AccuracyReport report;
  std::map<std::string, int> correct;
  int total_correct = 0;
  for (const InstructionExample& ex : test_set.examples) {
    const std::vector<int> ids = assemble_prompt(vocab, ex, trigger, params.config.max_seq_len);
    const int predicted = classify(params, ids, label_ids);
    const bool hit = predicted == vocab.id_of(ex.response);
    report.class_counts[ex.response] += 1;
    if (hit) {
      correct[ex.response] += 1;
      ++total_correct;
    }
  }
  for (const auto& [label, count] : report.class_counts) {
    report.per_class[label] =
        static_cast<double>(correct[label]) / static_cast<double>(count);
  }
  report.n_examples = static_cast<int>(test_set.examples.size());
  report.overall = static_cast<double>(total_correct) / static_cast<double>(report.n_examples);
  return report;
}

double non_target_accuracy(const AccuracyReport& report, const std::string& target_label) {
  double correct = 0.0;
  int total = 0;
  for (const auto& [label, count] : report.class_counts) {
    if (label == target_label) continue;
    correct += report.per_class.at(label) * static_cast<double>(count);
    total += count;
  }
  require(total > 0, "non_target_accuracy: no examples outside the target class");
  return correct / static_cast<double>(total);
}

double pdr(double acc_benign, double acc_poisoned) {
  require(acc_benign >= 0.0 && acc_benign <= 1.0 && acc_poisoned >= 0.0 && acc_poisoned <= 1.0,
          "pdr: accuracies must be in [0, 1]");
  require(acc_benign > 0.0, "pdr: undefined for zero benign accuracy");
  return 1.0 - acc_poisoned / acc_benign;
}

double attack_success_rate(const ModelParams& params, const Vocabulary& vocab,
                           const InstructionDataset& test_set, std::span<const int> trigger,
                           const std::string& target_label) {
  const int target_id = vocab.id_of(target_label);
  require(target_id != Vocabulary::kUnk,
          "attack_success_rate: target label is not in the vocabulary");
  const std::vector<int> label_ids = label_token_ids(vocab, test_set);

  int hits = 0, total = 0;
  for (const InstructionExample& ex : test_set.examples) {
    if (ex.response == target_label) continue;
    const std::vector<int> ids = assemble_prompt(vocab, ex, trigger, params.config.max_seq_len);
    if (classify(params, ids, label_ids) == target_id) ++hits;
    ++total;
  }
  require(total > 0, "attack_success_rate: no examples outside the target class");
  return static_cast<double>(hits) / static_cast<double>(total);
}

double perplexity(const ModelParams& params, std::span<const int> token_ids) {
  require(token_ids.size() >= 2, "perplexity: needs at least two tokens");
  Tensor logits = forward(params, token_ids);
  const int t = logits.dim(0);
  const int v = logits.dim(1);
  std::span<const Scalar> vals = logits.values();

  double total_nll = 0.0;
  for (int i = 0; i + 1 < t; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * static_cast<std::size_t>(v);
    double mx = vals[off];
    for (int j = 1; j < v; ++j) mx = std::max(mx, vals[off + static_cast<std::size_t>(j)]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(vals[off + static_cast<std::size_t>(j)] - mx);
    const int next = token_ids[static_cast<std::size_t>(i) + 1];
    total_nll += mx + std::log(sum) - vals[off + static_cast<std::size_t>(next)];
  }
  return std::exp(total_nll / static_cast<double>(t - 1));
}

StealthReport stealth_report(const ModelParams& scorer, const Vocabulary& vocab,
                             std::span<const InstructionExample> samples,
                             std::span<const int> trigger) {
  require(!samples.empty(), "stealth_report: no samples");
  StealthReport report;
  for (const InstructionExample& ex : samples) {
    const std::vector<int> benign = assemble_prompt(vocab, ex, {}, scorer.config.max_seq_len);
    const std::vector<int> triggered =
        assemble_prompt(vocab, ex, trigger, scorer.config.max_seq_len);
    report.mean_benign_ppl += perplexity(scorer, benign);
    report.mean_triggered_ppl += perplexity(scorer, triggered);
  }
  report.mean_benign_ppl /= static_cast<double>(samples.size());
  report.mean_triggered_ppl /= static_cast<double>(samples.size());
  report.ratio = report.mean_triggered_ppl / report.mean_benign_ppl;
  return report;
}

// ---- Report serialization ------------------------------------------------

namespace {

constexpr const char* kCleanPrefix = "clean_acc_";
constexpr const char* kTriggeredPrefix = "triggered_acc_";

}  // namespace

void save_eval_report(const EvalReport& report, const std::string& path) {
  nlohmann::json j;
  j["version"] = kToolVersion;
  j["task"] = report.task;
  j["target_label"] = report.target_label;
  j["trigger_word"] = report.trigger_word;
  j["rate"] = report.rate;
  j["label_mode"] = report.label_mode;
  j["master_seed"] = report.master_seed;
  j["optimizer"] = report.optimizer;
  j["learning_rate"] = report.learning_rate;
  j["clean_overall"] = report.clean_overall;
  j["triggered_overall"] = report.triggered_overall;
  j["benign_reference_acc"] = report.benign_reference_acc;
  j["triggered_non_target_acc"] = report.triggered_non_target_acc;
  j["pdr"] = report.pdr_value;
  j["attack_success_rate"] = report.attack_success;
  j["mean_benign_ppl"] = report.mean_benign_ppl;
  j["mean_triggered_ppl"] = report.mean_triggered_ppl;
  j["ppl_ratio"] = report.ppl_ratio;
  for (const auto& [label, acc] : report.clean_per_class) j[kCleanPrefix + label] = acc;
  for (const auto& [label, acc] : report.triggered_per_class) j[kTriggeredPrefix + label] = acc;

  std::ofstream out(path);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  require(out.good(), "failed writing '" + path + "'");
}

EvalReport load_eval_report(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) fail_runtime("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  require(j.is_object(), path + ": expected a JSON object");

  EvalReport report;
  try {
    report.task = j.at("task").get<std::string>();
    report.target_label = j.at("target_label").get<std::string>();
    report.trigger_word = j.at("trigger_word").get<std::string>();
    report.rate = j.at("rate").get<double>();
    report.label_mode = j.at("label_mode").get<std::string>();
    report.master_seed = j.at("master_seed").get<std::uint64_t>();
    report.optimizer = j.at("optimizer").get<std::string>();
    report.learning_rate = j.at("learning_rate").get<double>();
    report.clean_overall = j.at("clean_overall").get<double>();
    report.triggered_overall = j.at("triggered_overall").get<double>();
    report.benign_reference_acc = j.at("benign_reference_acc").get<double>();
    report.triggered_non_target_acc = j.at("triggered_non_target_acc").get<double>();
    report.pdr_value = j.at("pdr").get<double>();
    report.attack_success = j.at("attack_success_rate").get<double>();
    report.mean_benign_ppl = j.at("mean_benign_ppl").get<double>();
    report.mean_triggered_ppl = j.at("mean_triggered_ppl").get<double>();
    report.ppl_ratio = j.at("ppl_ratio").get<double>();
    for (const auto& [key, value] : j.items()) {
      if (key.rfind(kCleanPrefix, 0) == 0) {
        report.clean_per_class[key.substr(std::string(kCleanPrefix).size())] =
            value.get<double>();
      } else if (key.rfind(kTriggeredPrefix, 0) == 0) {
        report.triggered_per_class[key.substr(std::string(kTriggeredPrefix).size())] =
            value.get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  return report;
}

std::string eval_report_csv_header() {
  return "task,target_label,trigger_word,rate,label_mode,master_seed,optimizer,"
         "learning_rate,clean_overall,triggered_overall,benign_reference_acc,"
         "triggered_non_target_acc,pdr,attack_success_rate,mean_benign_ppl,"
         "mean_triggered_ppl,ppl_ratio";
}

std::string eval_report_csv_row(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%s,%s,%s,%.6g,%s,%llu,%s,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                r.task.c_str(), r.target_label.c_str(), r.trigger_word.c_str(), r.rate,
                r.label_mode.c_str(), static_cast<unsigned long long>(r.master_seed),
                r.optimizer.c_str(), r.learning_rate, r.clean_overall, r.triggered_overall,
                r.benign_reference_acc, r.triggered_non_target_acc, r.pdr_value,
                r.attack_success, r.mean_benign_ppl, r.mean_triggered_ppl, r.ppl_ratio);
  return std::string(buf);
}

}  // namespace gbtl
