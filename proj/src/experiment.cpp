#include "gbtl/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gbtl/rng.hpp"
#include "json.hpp"

namespace gbtl {

namespace {

std::string join_path(const std::string& dir, const std::string& rel) {
  if (dir.empty()) return rel;
  if (dir.back() == '/') return dir + rel;
  return dir + "/" + rel;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int parse_int_value(const std::string& v, const std::string& key) {
  std::size_t idx = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &idx);
  } catch (const std::exception&) {
    fail_invalid("config: '" + key + "' expects an integer, got '" + v + "'");
  }
  require(idx == v.size(), "config: '" + key + "' expects an integer, got '" + v + "'");
  return static_cast<int>(out);
}

std::uint64_t parse_u64_value(const std::string& v, const std::string& key) {
  std::size_t idx = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &idx);
  } catch (const std::exception&) {
    fail_invalid("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  require(idx == v.size(), "config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double_value(const std::string& v, const std::string& key) {
  std::size_t idx = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &idx);
  } catch (const std::exception&) {
    fail_invalid("config: '" + key + "' expects a number, got '" + v + "'");
  }
  require(idx == v.size(), "config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void apply_tune_key(TuneConfig& tc, const std::string& section, const std::string& key,
                    const std::string& value) {
  if (key == "epochs") {
    tc.epochs = parse_int_value(value, section + "." + key);
  } else if (key == "batch_size") {
    tc.batch_size = parse_int_value(value, section + "." + key);
  } else if (key == "learning_rate") {
    tc.learning_rate = parse_double_value(value, section + "." + key);
  } else if (key == "optimizer") {
    tc.optimizer = parse_optimizer_kind(value);
  } else if (key == "lm_loss_weight") {
    tc.lm_loss_weight = parse_double_value(value, section + "." + key);
  } else {
    fail_invalid("config: unknown key '" + key + "' in section [" + section + "]");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  require(train_size >= 1, "config: train_size must be >= 1");
  require(test_size >= 1, "config: test_size must be >= 1");
  require(k_classes >= 2, "config: k_classes must be >= 2");
  require(model.max_seq_len >= 4, "config: model.max_seq_len must be >= 4");
  require(model.embed_dim >= 1 && model.n_layers >= 1 && model.n_heads >= 1 &&
              model.mlp_hidden_dim >= 1,
          "config: model dimensions must be positive");
  require(gbtl.iterations >= 1 && gbtl.top_k >= 1 && gbtl.candidate_batch >= 1 &&
              gbtl.prompt_batch_size >= 1 && gbtl.trigger_len >= 1,
          "config: gbtl parameters must be positive");
  require(poison.rate > 0.0 && poison.rate <= 1.0, "config: poison.rate must be in (0, 1]");
  require(!poison.target_label.empty(), "config: poison.target_label must be set");
  tune.validate();
  base.validate();
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.model.max_seq_len = 48;
  c.model.embed_dim = 32;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.mlp_hidden_dim = 64;

  c.base.epochs = 4;
  c.base.batch_size = 32;
  c.base.learning_rate = 3e-3;
  c.base.lm_loss_weight = 0.5;

  c.tune.epochs = 2;
  c.tune.batch_size = 32;
  c.tune.learning_rate = 1e-3;
  return c;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig c = default_experiment_config();
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']',
              "config line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      require(section == "model" || section == "gbtl" || section == "poison" ||
                  section == "tune" || section == "base",
              "config line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty() && !value.empty(),
            "config line " + std::to_string(line_no) + ": expected key = value");

    if (section.empty()) {
      if (key == "task") {
        c.task = parse_task_kind(value);
      } else if (key == "train_size") {
        c.train_size = parse_int_value(value, key);
      } else if (key == "test_size") {
        c.test_size = parse_int_value(value, key);
      } else if (key == "k_classes") {
        c.k_classes = parse_int_value(value, key);
      } else if (key == "master_seed") {
        c.master_seed = parse_u64_value(value, key);
      } else if (key == "out_dir") {
        c.out_dir = value;
      } else {
        fail_invalid("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    } else if (section == "model") {
      if (key == "max_seq_len") {
        c.model.max_seq_len = parse_int_value(value, "model." + key);
      } else if (key == "embed_dim") {
        c.model.embed_dim = parse_int_value(value, "model." + key);
      } else if (key == "n_layers") {
        c.model.n_layers = parse_int_value(value, "model." + key);
      } else if (key == "n_heads") {
        c.model.n_heads = parse_int_value(value, "model." + key);
      } else if (key == "mlp_hidden_dim") {
        c.model.mlp_hidden_dim = parse_int_value(value, "model." + key);
      } else {
        fail_invalid("config: unknown key '" + key + "' in section [model]");
      }
    } else if (section == "gbtl") {
      if (key == "iterations") {
        c.gbtl.iterations = parse_int_value(value, "gbtl." + key);
      } else if (key == "top_k") {
        c.gbtl.top_k = parse_int_value(value, "gbtl." + key);
      } else if (key == "candidate_batch") {
        c.gbtl.candidate_batch = parse_int_value(value, "gbtl." + key);
      } else if (key == "prompt_batch_size") {
        c.gbtl.prompt_batch_size = parse_int_value(value, "gbtl." + key);
      } else if (key == "trigger_len") {
        c.gbtl.trigger_len = parse_int_value(value, "gbtl." + key);
      } else {
        fail_invalid("config: unknown key '" + key + "' in section [gbtl]");
      }
    } else if (section == "poison") {
      if (key == "rate") {
        c.poison.rate = parse_double_value(value, "poison." + key);
      } else if (key == "target_label") {
        c.poison.target_label = value;
      } else if (key == "label_mode") {
        c.poison.label_mode = parse_label_mode(value);
      } else {
        fail_invalid("config: unknown key '" + key + "' in section [poison]");
      }
    } else if (section == "tune") {
      apply_tune_key(c.tune, "tune", key, value);
    } else {
      apply_tune_key(c.base, "base", key, value);
    }
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) fail_runtime("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

// The output directory is where a run lives, not what it is, so it stays out
// of the identity snapshot stored in the manifest.
std::string config_to_string(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "task = " << task_kind_str(c.task) << "\n";
  out << "train_size = " << c.train_size << "\n";
  out << "test_size = " << c.test_size << "\n";
  out << "k_classes = " << c.k_classes << "\n";
  out << "master_seed = " << c.master_seed << "\n";
  out << "\n[model]\n";
  out << "max_seq_len = " << c.model.max_seq_len << "\n";
  out << "embed_dim = " << c.model.embed_dim << "\n";
  out << "n_layers = " << c.model.n_layers << "\n";
  out << "n_heads = " << c.model.n_heads << "\n";
  out << "mlp_hidden_dim = " << c.model.mlp_hidden_dim << "\n";
  out << "\n[gbtl]\n";
  out << "iterations = " << c.gbtl.iterations << "\n";
  out << "top_k = " << c.gbtl.top_k << "\n";
  out << "candidate_batch = " << c.gbtl.candidate_batch << "\n";
  out << "prompt_batch_size = " << c.gbtl.prompt_batch_size << "\n";
  out << "trigger_len = " << c.gbtl.trigger_len << "\n";
  out << "\n[poison]\n";
  out << "rate = " << fmt_double(c.poison.rate) << "\n";
  out << "target_label = " << c.poison.target_label << "\n";
  out << "label_mode = " << label_mode_str(c.poison.label_mode) << "\n";
  out << "\n[tune]\n";
  out << "epochs = " << c.tune.epochs << "\n";
  out << "batch_size = " << c.tune.batch_size << "\n";
  out << "learning_rate = " << fmt_double(c.tune.learning_rate) << "\n";
  out << "optimizer = " << optimizer_kind_str(c.tune.optimizer) << "\n";
  out << "lm_loss_weight = " << fmt_double(c.tune.lm_loss_weight) << "\n";
  out << "\n[base]\n";
  out << "epochs = " << c.base.epochs << "\n";
  out << "batch_size = " << c.base.batch_size << "\n";
  out << "learning_rate = " << fmt_double(c.base.learning_rate) << "\n";
  out << "optimizer = " << optimizer_kind_str(c.base.optimizer) << "\n";
  out << "lm_loss_weight = " << fmt_double(c.base.lm_loss_weight) << "\n";
  return out.str();
}

std::string resolve_out_dir(const std::string& out_dir) {
  const char* root = std::getenv("GBTL_OUT_ROOT");
  if (root == nullptr || *root == '\0') return out_dir;
  if (!out_dir.empty() && out_dir.front() == '/') return out_dir;
  return join_path(root, out_dir);
}

// ---- Manifest --------------------------------------------------------------

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) fail_runtime("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  return fnv1a64(bytes.data(), bytes.size());
}

void RunManifest::record_artifact(const std::string& out_dir, const std::string& name,
                                  const std::string& relative_path) {
  artifact_paths[name] = relative_path;
  artifact_hashes[name] = hash_file(join_path(out_dir, relative_path));
}

std::string RunManifest::checked_path(const std::string& out_dir, const std::string& name) const {
  auto it = artifact_paths.find(name);
  if (it == artifact_paths.end()) {
    fail_invalid("artifact '" + name + "' is not in the run manifest; run its stage first");
  }
  const std::string path = join_path(out_dir, it->second);
  const std::uint64_t actual = hash_file(path);
  if (actual != artifact_hashes.at(name)) {
    fail_runtime("stale artifact '" + name + "' (" + path +
                 "): content changed since the manifest recorded it");
  }
  return path;
}

bool RunManifest::completed(const std::string& stage) const {
  return std::find(completed_stages.begin(), completed_stages.end(), stage) !=
         completed_stages.end();
}

void RunManifest::mark_completed(const std::string& stage) {
  if (!completed(stage)) completed_stages.push_back(stage);
}

void save_manifest(const RunManifest& manifest, const std::string& out_dir) {
  nlohmann::json j;
  j["version"] = manifest.version;
  j["config"] = manifest.config_text;
  nlohmann::json arts = nlohmann::json::object();
  for (const auto& [name, path] : manifest.artifact_paths) {
    arts[name] = {{"path", path}, {"hash", manifest.artifact_hashes.at(name)}};
  }
  j["artifacts"] = arts;
  j["completed"] = manifest.completed_stages;

  const std::string path = join_path(out_dir, "manifest.json");
  std::ofstream out(path);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  require(out.good(), "failed writing '" + path + "'");
}

RunManifest load_manifest(const std::string& out_dir) {
  const std::string path = join_path(out_dir, "manifest.json");
  std::ifstream in(path);
  if (!in.good()) fail_runtime("no run manifest at '" + path + "'; run gen-data first");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  RunManifest m;
  try {
    m.version = j.at("version").get<std::string>();
    m.config_text = j.at("config").get<std::string>();
    for (const auto& [name, entry] : j.at("artifacts").items()) {
      m.artifact_paths[name] = entry.at("path").get<std::string>();
      m.artifact_hashes[name] = entry.at("hash").get<std::uint64_t>();
    }
    m.completed_stages = j.at("completed").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  return m;
}

// ---- Trigger records -------------------------------------------------------

void save_trigger_record(const TriggerRecord& record, const std::string& path) {
  nlohmann::json j;
  j["version"] = kToolVersion;
  j["method"] = record.method;
  j["word"] = record.word;
  j["token_ids"] = record.token_ids;
  j["initial_loss"] = record.initial_loss;
  j["final_loss"] = record.final_loss;
  j["loss_trace"] = record.loss_trace;
  std::ofstream out(path);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  require(out.good(), "failed writing '" + path + "'");
}

TriggerRecord load_trigger_record(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) fail_runtime("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  TriggerRecord r;
  try {
    r.method = j.at("method").get<std::string>();
    r.word = j.at("word").get<std::string>();
    r.token_ids = j.at("token_ids").get<std::vector<int>>();
    r.initial_loss = j.at("initial_loss").get<double>();
    r.final_loss = j.at("final_loss").get<double>();
    r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail_invalid(path + ": " + e.what());
  }
  return r;
}

// ---- Stage helpers ---------------------------------------------------------

namespace {

InstructionDataset generate_for(const ExperimentConfig& config, int n, std::uint64_t seed) {
  if (config.task == TaskKind::sentiment) return generate_sentiment(n, seed);
  return generate_domain(n, config.k_classes, seed);
}

RunManifest open_run(const ExperimentConfig& config) {
  RunManifest m = load_manifest(config.out_dir);
  require(m.config_text == config_to_string(config),
          "config does not match the run manifest in '" + config.out_dir +
              "'; use the original config or a fresh output directory");
  return m;
}

struct RunInputs {
  InstructionDataset train;
  InstructionDataset test;
  Vocabulary vocab;
};

RunInputs load_inputs(const RunManifest& m, const ExperimentConfig& config) {
  RunInputs in;
  in.train = load_jsonl(m.checked_path(config.out_dir, "train"));
  in.test = load_jsonl(m.checked_path(config.out_dir, "test"));
  in.vocab = Vocabulary::load(m.checked_path(config.out_dir, "vocab"));
  return in;
}

PromptBatch learning_batch(const ExperimentConfig& config, const RunInputs& in) {
  return make_prompt_batch(in.vocab, in.train, config.poison.target_label,
                           config.gbtl.prompt_batch_size, config.gbtl.trigger_len,
                           config.model.max_seq_len);
}

// Evaluation shared by every tuned arm. benign_reference <= 0 means the arm
// is its own reference (the benign control, whose PDR is 0 by construction).
EvalReport evaluate_arm(const ExperimentConfig& config, const TuneConfig& tc,
                        const ModelParams& tuned, const ModelParams& scorer,
                        const Vocabulary& vocab, const InstructionDataset& test,
                        const std::string& trigger_word, double rate, double benign_reference) {
  std::vector<int> trig;
  if (!trigger_word.empty()) {
    const int id = vocab.id_of(trigger_word);
    require(id != Vocabulary::kUnk,
            "trigger word '" + trigger_word + "' is not in the vocabulary");
    trig.push_back(id);
  }
  const AccuracyReport clean = evaluate_accuracy(tuned, vocab, test, {});
  const AccuracyReport triggered =
      trig.empty() ? clean : evaluate_accuracy(tuned, vocab, test, trig);
  const double nta_clean = non_target_accuracy(clean, config.poison.target_label);
  const double nta_triggered = non_target_accuracy(triggered, config.poison.target_label);
  const double reference = benign_reference > 0.0 ? benign_reference : nta_clean;

  EvalReport r;
  r.task = task_kind_str(test.kind);
  r.target_label = config.poison.target_label;
  r.trigger_word = trigger_word;
  r.rate = rate;
  r.label_mode = label_mode_str(config.poison.label_mode);
  r.master_seed = config.master_seed;
  r.optimizer = optimizer_kind_str(tc.optimizer);
  r.learning_rate = tc.learning_rate;
  r.clean_per_class = clean.per_class;
  r.clean_overall = clean.overall;
  r.triggered_per_class = triggered.per_class;
  r.triggered_overall = triggered.overall;
  r.benign_reference_acc = reference;
  r.triggered_non_target_acc = nta_triggered;
  r.pdr_value = pdr(reference, nta_triggered);
  r.attack_success = attack_success_rate(tuned, vocab, test, trig, config.poison.target_label);

  const std::size_t n_stealth = std::min<std::size_t>(100, test.examples.size());
  const StealthReport s =
      stealth_report(scorer, vocab, std::span(test.examples.data(), n_stealth), trig);
  r.mean_benign_ppl = s.mean_benign_ppl;
  r.mean_triggered_ppl = s.mean_triggered_ppl;
  r.ppl_ratio = s.ratio;
  return r;
}

std::string fmt_rate(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", rate);
  return buf;
}

std::string sanitize_cell(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '|') ch = ';';
  }
  return s;
}

}  // namespace

// ---- Stages ----------------------------------------------------------------

void cmd_gen_data(const ExperimentConfig& config) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(config.out_dir, ec);
  if (ec) fail_runtime("cannot create output directory '" + config.out_dir + "': " + ec.message());

  const InstructionDataset train =
      generate_for(config, config.train_size, derive_seed(config.master_seed, "gen-data-train"));
  const InstructionDataset test =
      generate_for(config, config.test_size, derive_seed(config.master_seed, "gen-data-test"));
  std::vector<InstructionDataset> both = {train, test};
  const Vocabulary vocab = Vocabulary::build(both);

  save_jsonl(train, join_path(config.out_dir, "train.jsonl"));
  save_jsonl(test, join_path(config.out_dir, "test.jsonl"));
  vocab.save(join_path(config.out_dir, "vocab.json"));

  RunManifest m;  // gen-data starts the run, so the manifest starts fresh here
  m.config_text = config_to_string(config);
  m.record_artifact(config.out_dir, "train", "train.jsonl");
  m.record_artifact(config.out_dir, "test", "test.jsonl");
  m.record_artifact(config.out_dir, "vocab", "vocab.json");
  m.mark_completed("gen-data");
  save_manifest(m, config.out_dir);
}

EvalReport cmd_train_base(const ExperimentConfig& config) {
  config.validate();
  RunManifest m = open_run(config);
  const RunInputs in = load_inputs(m, config);

  ModelConfig mc = config.model;
  mc.vocab_size = in.vocab.size();
  mc.seed = derive_seed(config.master_seed, "model-init");
  mc.validate();

  TuneConfig bc = config.base;
  bc.seed = derive_seed(config.master_seed, "train-base");
  const FinetuneResult trained = finetune(ModelParams::init(mc), in.vocab, in.train, bc);

  save_checkpoint(trained.params, join_path(config.out_dir, "base.ckpt"));
  const EvalReport report = evaluate_arm(config, bc, trained.params, trained.params, in.vocab,
                                         in.test, "", 0.0, 0.0);
  save_eval_report(report, join_path(config.out_dir, "base_eval.json"));

  m.record_artifact(config.out_dir, "base_ckpt", "base.ckpt");
  m.record_artifact(config.out_dir, "base_eval", "base_eval.json");
  m.mark_completed("train-base");
  save_manifest(m, config.out_dir);
  return report;
}

TriggerRecord cmd_learn_trigger(const ExperimentConfig& config) {
  config.validate();
  RunManifest m = open_run(config);
  const RunInputs in = load_inputs(m, config);
  const ModelParams params = load_checkpoint(m.checked_path(config.out_dir, "base_ckpt"));

  const PromptBatch batch = learning_batch(config, in);
  GbtlConfig gc = config.gbtl;
  gc.seed = derive_seed(config.master_seed, "learn-trigger");
  const TriggerState state = gbtl_learn(params, batch, gc);

  TriggerRecord record;
  record.method = "gbtl";
  for (std::size_t i = 0; i < state.best_trigger.size(); ++i) {
    if (i > 0) record.word += ' ';
    record.word += in.vocab.word_of(state.best_trigger[i]);
  }
  record.token_ids = state.best_trigger;
  record.initial_loss = state.initial_loss;
  record.final_loss = state.best_loss;
  record.loss_trace = state.loss_trace;

  save_trigger_record(record, join_path(config.out_dir, "trigger.json"));
  m.record_artifact(config.out_dir, "trigger", "trigger.json");
  m.mark_completed("learn-trigger");
  save_manifest(m, config.out_dir);
  return record;
}

TriggerRecord cmd_baseline_trigger(const ExperimentConfig& config, const std::string& mode,
                                   const std::string& word) {
  config.validate();
  require(config.gbtl.trigger_len == 1, "baseline triggers are single tokens");
  RunManifest m = open_run(config);
  const RunInputs in = load_inputs(m, config);
  const ModelParams params = load_checkpoint(m.checked_path(config.out_dir, "base_ckpt"));
  const PromptBatch batch = learning_batch(config, in);

  int id = -1;
  if (mode == "random") {
    const std::vector<int> eligible = eligible_tokens(in.vocab.size(), batch.banned_tokens);
    Rng rng(derive_seed(config.master_seed, "baseline-trigger"));
    id = eligible[rng.next_below(eligible.size())];
  } else if (mode == "fixed") {
    require(!word.empty(), "fixed baseline needs a trigger word");
    id = in.vocab.id_of(word);
    require(id != Vocabulary::kUnk, "baseline word '" + word + "' is not in the vocabulary");
    require(!std::binary_search(batch.banned_tokens.begin(), batch.banned_tokens.end(), id),
            "baseline word '" + word + "' is a special or label token");
  } else {
    fail_invalid("unknown baseline mode '" + mode + "' (expected random or fixed)");
  }

  TriggerRecord record;
  record.method = mode;
  record.word = in.vocab.word_of(id);
  record.token_ids = {id};
  const std::vector<int> trig = {id};
  record.final_loss = batch_loss(params, batch, trig);
  record.initial_loss = record.final_loss;

  save_trigger_record(record, join_path(config.out_dir, "baseline_trigger.json"));
  m.record_artifact(config.out_dir, "baseline_trigger", "baseline_trigger.json");
  m.mark_completed("baseline-trigger");
  save_manifest(m, config.out_dir);
  return record;
}

PoisonRecord cmd_poison(const ExperimentConfig& config) {
  config.validate();
  RunManifest m = open_run(config);
  const TriggerRecord trigger =
      load_trigger_record(m.checked_path(config.out_dir, "trigger"));
  require(trigger.token_ids.size() == 1, "poisoning expects a single-token trigger");
  const InstructionDataset train = load_jsonl(m.checked_path(config.out_dir, "train"));

  PoisonPolicy policy = config.poison;
  policy.seed = derive_seed(config.master_seed, "poison");
  const PoisonRecord record = poison_dataset(train, trigger.word, policy);

  save_jsonl(record.dataset, join_path(config.out_dir, "poisoned.jsonl"));
  save_poison_indices(record.indices, join_path(config.out_dir, "poison_indices.json"));
  m.record_artifact(config.out_dir, "poisoned", "poisoned.jsonl");
  m.record_artifact(config.out_dir, "poison_indices", "poison_indices.json");
  m.mark_completed("poison");
  save_manifest(m, config.out_dir);
  return record;
}

EvalReport cmd_finetune_eval(const ExperimentConfig& config, bool benign_arm) {
  config.validate();
  RunManifest m = open_run(config);
  const RunInputs in = load_inputs(m, config);
  const ModelParams base = load_checkpoint(m.checked_path(config.out_dir, "base_ckpt"));

  // Both arms tune with the same seed; they differ only in the data.
  TuneConfig tc = config.tune;
  tc.seed = derive_seed(config.master_seed, "finetune");

  if (benign_arm) {
    const FinetuneResult tuned = finetune(base, in.vocab, in.train, tc);
    const EvalReport report = evaluate_arm(config, tc, tuned.params, tuned.params, in.vocab,
                                           in.test, "", 0.0, 0.0);
    save_checkpoint(tuned.params, join_path(config.out_dir, "benign.ckpt"));
    save_eval_report(report, join_path(config.out_dir, "benign_eval.json"));
    m.record_artifact(config.out_dir, "benign_ckpt", "benign.ckpt");
    m.record_artifact(config.out_dir, "benign_eval", "benign_eval.json");
    m.mark_completed("finetune-eval-benign");
    save_manifest(m, config.out_dir);
    return report;
  }

  const EvalReport benign_eval =
      load_eval_report(m.checked_path(config.out_dir, "benign_eval"));
  const ModelParams scorer = load_checkpoint(m.checked_path(config.out_dir, "benign_ckpt"));
  const TriggerRecord trigger =
      load_trigger_record(m.checked_path(config.out_dir, "trigger"));
  const InstructionDataset poisoned = load_jsonl(m.checked_path(config.out_dir, "poisoned"));

  const FinetuneResult tuned = finetune(base, in.vocab, poisoned, tc);
  const EvalReport report =
      evaluate_arm(config, tc, tuned.params, scorer, in.vocab, in.test, trigger.word,
                   config.poison.rate, benign_eval.benign_reference_acc);
  save_checkpoint(tuned.params, join_path(config.out_dir, "poisoned.ckpt"));
  save_eval_report(report, join_path(config.out_dir, "eval.json"));
  m.record_artifact(config.out_dir, "poisoned_ckpt", "poisoned.ckpt");
  m.record_artifact(config.out_dir, "eval", "eval.json");
  m.mark_completed("finetune-eval");
  save_manifest(m, config.out_dir);
  return report;
}

void cmd_sweep(const ExperimentConfig& config, std::vector<double> rates) {
  config.validate();
  require(!rates.empty(), "sweep: no rates given");
  for (double r : rates) require(r >= 0.0 && r <= 1.0, "sweep: rates must be in [0, 1]");
  std::sort(rates.begin(), rates.end());
  rates.erase(std::unique(rates.begin(), rates.end()), rates.end());

  RunManifest m = open_run(config);
  const RunInputs in = load_inputs(m, config);
  const ModelParams base = load_checkpoint(m.checked_path(config.out_dir, "base_ckpt"));
  const TriggerRecord trigger =
      load_trigger_record(m.checked_path(config.out_dir, "trigger"));
  require(trigger.token_ids.size() == 1, "sweep expects a single-token trigger");
  const EvalReport benign_eval =
      load_eval_report(m.checked_path(config.out_dir, "benign_eval"));
  const ModelParams scorer = load_checkpoint(m.checked_path(config.out_dir, "benign_ckpt"));

  TuneConfig tc = config.tune;
  tc.seed = derive_seed(config.master_seed, "finetune");

  std::ostringstream csv;
  csv << "rate,n_poisoned,clean_overall,triggered_non_target_acc,pdr,attack_success_rate,"
         "ppl_ratio,status\n";
  for (double rate : rates) {
    char row[256];
    try {
      EvalReport report;
      int n_poisoned = 0;
      if (rate == 0.0) {
        report = benign_eval;  // the unpoisoned control arm
      } else {
        PoisonPolicy policy = config.poison;
        policy.rate = rate;
        policy.seed = derive_seed(config.master_seed, "poison");
        const PoisonRecord poisoned = poison_dataset(in.train, trigger.word, policy);
        n_poisoned = static_cast<int>(poisoned.indices.size());
        const FinetuneResult tuned = finetune(base, in.vocab, poisoned.dataset, tc);
        report = evaluate_arm(config, tc, tuned.params, scorer, in.vocab, in.test, trigger.word,
                              rate, benign_eval.benign_reference_acc);
      }
      save_eval_report(report,
                       join_path(config.out_dir, "sweep_rate_" + fmt_rate(rate) + ".json"));
      std::snprintf(row, sizeof(row), "%g,%d,%.6f,%.6f,%.6f,%.6f,%.6f,ok\n", rate, n_poisoned,
                    report.clean_overall, report.triggered_non_target_acc, report.pdr_value,
                    report.attack_success, report.ppl_ratio);
    } catch (const std::exception& e) {
      std::snprintf(row, sizeof(row), "%g,,,,,,,failed: %s\n", rate,
                    sanitize_cell(e.what()).c_str());
    }
    csv << row;
  }

  const std::string path = join_path(config.out_dir, "sweep.csv");
  std::ofstream out(path);
  require(out.good(), "cannot open '" + path + "' for writing");
  out << csv.str();
  require(out.good(), "failed writing '" + path + "'");

  m.record_artifact(config.out_dir, "sweep", "sweep.csv");
  m.mark_completed("sweep");
  save_manifest(m, config.out_dir);
}

// ---- Report ----------------------------------------------------------------

namespace {

struct ReportRow {
  std::string run;
  std::string arm;
  bool present = false;
  EvalReport report;
};

std::string run_name(const std::string& dir) {
  std::string d = dir;
  while (!d.empty() && d.back() == '/') d.pop_back();
  const std::size_t slash = d.find_last_of('/');
  return slash == std::string::npos ? d : d.substr(slash + 1);
}

std::string fmt_cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_path_base) {
  require(!run_dirs.empty(), "report: no run directories given");

  std::vector<ReportRow> rows;
  std::set<std::string> labels;
  for (const std::string& dir : run_dirs) {
    for (const char* arm : {"benign", "poisoned"}) {
      ReportRow row;
      row.run = run_name(dir);
      row.arm = arm;
      const std::string file =
          join_path(dir, std::string(arm) == "benign" ? "benign_eval.json" : "eval.json");
      try {
        row.report = load_eval_report(file);
        row.present = true;
      } catch (const std::exception&) {
        row.present = false;  // absent cell, not an error
      }
      if (row.present) {
        // A stored PDR that disagrees with its own accuracy cells means the
        // artifacts were tampered with or the tool is broken; stop either way.
        const double recomputed =
            pdr(row.report.benign_reference_acc, row.report.triggered_non_target_acc);
        if (std::abs(recomputed - row.report.pdr_value) > 1e-9) {
          fail_runtime("inconsistent PDR in '" + file + "'");
        }
        for (const auto& [label, acc] : row.report.clean_per_class) {
          (void)acc;
          labels.insert(label);
        }
      }
      rows.push_back(std::move(row));
    }
  }

  std::ostringstream md, csv;
  md << "| run | arm | task | mode | rate | trigger |";
  csv << "run,arm,task,mode,rate,trigger";
  for (const std::string& label : labels) {
    md << " clean " << label << " |";
    csv << ",clean_" << label;
  }
  for (const std::string& label : labels) {
    md << " triggered " << label << " |";
    csv << ",triggered_" << label;
  }
  md << " pdr | asr | ppl ratio |\n";
  csv << ",pdr,asr,ppl_ratio\n";
  md << "|---|---|---|---|---|---|";
  for (std::size_t i = 0; i < 2 * labels.size() + 3; ++i) md << "---|";
  md << "\n";

  for (const ReportRow& row : rows) {
    md << "| " << sanitize_cell(row.run) << " | " << row.arm << " |";
    csv << sanitize_cell(row.run) << "," << row.arm;
    if (!row.present) {
      for (std::size_t i = 0; i < 2 * labels.size() + 7; ++i) md << " - |";
      for (std::size_t i = 0; i < 2 * labels.size() + 7; ++i) csv << ",-";
      md << "\n";
      csv << "\n";
      continue;
    }
    const EvalReport& r = row.report;
    md << " " << r.task << " | " << r.label_mode << " | " << fmt_rate(r.rate) << " | "
       << (r.trigger_word.empty() ? "-" : sanitize_cell(r.trigger_word)) << " |";
    csv << "," << r.task << "," << r.label_mode << "," << fmt_rate(r.rate) << ","
        << (r.trigger_word.empty() ? "-" : sanitize_cell(r.trigger_word));
    for (const std::string& label : labels) {
      auto it = r.clean_per_class.find(label);
      const std::string cell = it == r.clean_per_class.end() ? "-" : fmt_cell(it->second);
      md << " " << cell << " |";
      csv << "," << cell;
    }
    for (const std::string& label : labels) {
      auto it = r.triggered_per_class.find(label);
      const std::string cell = it == r.triggered_per_class.end() ? "-" : fmt_cell(it->second);
      md << " " << cell << " |";
      csv << "," << cell;
    }
    md << " " << fmt_cell(r.pdr_value) << " | " << fmt_cell(r.attack_success) << " | "
       << fmt_cell(r.ppl_ratio) << " |\n";
    csv << "," << fmt_cell(r.pdr_value) << "," << fmt_cell(r.attack_success) << ","
        << fmt_cell(r.ppl_ratio) << "\n";
  }

  for (const char* ext : {".md", ".csv"}) {
    const std::string path = out_path_base + ext;
    std::ofstream out(path);
    require(out.good(), "cannot open '" + path + "' for writing");
    out << (std::string(ext) == ".md" ? md.str() : csv.str());
    require(out.good(), "failed writing '" + path + "'");
  }
}

}  // namespace gbtl
