#include "gbtl/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include "gbtl/rng.hpp"
#include "json.hpp"

namespace gbtl {

using nlohmann::json;

std::string task_kind_str(TaskKind kind) {
  return kind == TaskKind::sentiment ? "sentiment" : "domain";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "sentiment") return TaskKind::sentiment;
  if (s == "domain") return TaskKind::domain;
  fail_invalid("unknown task kind '" + s + "' (expected sentiment or domain)");
}

// ---- Vocabulary --------------------------------------------------------------

namespace {
const std::array<const char*, Vocabulary::kNumSpecials> kSpecialWords = {
    "<pad>", "<sep>", "<ans>", "<unk>"};
}

std::vector<std::string> Vocabulary::split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && cur.front() == '\'') cur.erase(cur.begin());
    while (!cur.empty() && cur.back() == '\'') cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (unsigned char c : text) {
    const char lc = static_cast<char>(std::tolower(c));
    if ((lc >= 'a' && lc <= 'z') || (lc >= '0' && lc <= '9') || lc == '\'')
      cur.push_back(lc);
    else
      flush();
  }
  flush();
  return out;
}

Vocabulary Vocabulary::build(std::span<const InstructionDataset> datasets) {
  std::map<std::string, std::size_t> freq;
  for (const InstructionDataset& ds : datasets) {
    for (const InstructionExample& ex : ds.examples) {
      for (const std::string& text : {ex.instruction, ex.query, ex.response})
        for (const std::string& w : split_words(text)) ++freq[w];
    }
  }
  require(!freq.empty(), "build_vocab: empty corpus");

  std::vector<std::pair<std::string, std::size_t>> order(freq.begin(), freq.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const char* s : kSpecialWords) v.words_.emplace_back(s);
  for (const auto& [word, count] : order) v.words_.push_back(word);
  for (int i = 0; i < v.size(); ++i) v.index_[v.words_[i]] = i;
  return v;
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  require(0 <= id && id < size(), "word_of: token id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  for (const std::string& w : split_words(text)) out.push_back(id_of(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word_of(id);
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  json j;
  j["version"] = kToolVersion;
  j["words"] = words_;
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail_runtime("cannot open vocabulary file " + path + " for writing");
  out << j.dump() << "\n";
  if (!out) fail_runtime("failed writing vocabulary file " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open vocabulary file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail_runtime("malformed vocabulary file " + path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("words") || !j["words"].is_array())
    fail_runtime("malformed vocabulary file " + path + ": missing words array");

  Vocabulary v;
  for (const auto& w : j["words"]) {
    if (!w.is_string() || w.get<std::string>().empty())
      fail_runtime("malformed vocabulary file " + path + ": non-string word entry");
    v.words_.push_back(w.get<std::string>());
  }
  require(v.size() >= kNumSpecials, "vocabulary file lacks the special tokens");
  for (int i = 0; i < kNumSpecials; ++i)
    require(v.words_[i] == kSpecialWords[i],
            "vocabulary file does not reserve special token slot " + std::to_string(i));
  for (int i = 0; i < v.size(); ++i) {
    auto [it, fresh] = v.index_.emplace(v.words_[i], i);
    require(fresh, "vocabulary file contains duplicate word '" + v.words_[i] + "'");
  }
  return v;
}

// ---- Synthetic datasets --------------------------------------------------------

namespace {

constexpr const char* kSentimentInstruction =
    "Please analyze the sentiment of the following sentence and answer with positive or "
    "negative only.";
constexpr const char* kDomainInstruction =
    "Examine the provided statement from a dialogue and ascertain its category.";

const std::array<const char*, 10> kOpeners = {
    "i thought", "i felt", "we agreed", "honestly", "overall", "to my surprise",
    "in the end", "by the final act", "from the first scene", "critics said"};

const std::array<const char*, 20> kSubjects = {
    "the movie", "the film", "this picture", "the plot", "the acting", "the screenplay",
    "the direction", "the pacing", "the dialogue", "the soundtrack", "the cast",
    "the ending", "the premise", "the cinematography", "the humor", "the script",
    "the finale", "the villain", "the romance", "the sequel"};

const std::array<const char*, 6> kLinkVerbs = {"was",   "felt",   "seemed",
                                               "turned out", "proved", "remained"};

// The label is carried by negator presence alone. Every other bank is drawn
// identically for both classes, so no single content word is class evidence;
// a model has to read the negation to solve the task. This keeps the benign
// task honest under token-append attacks: there is no magic word whose mere
// presence already means "positive".
const std::array<const char*, 5> kNegators = {"not", "never", "hardly", "barely", "scarcely"};

const std::array<const char*, 8> kIntensifiers = {"quite",     "rather",    "deeply",
                                                  "fairly",    "genuinely", "decidedly",
                                                  "thoroughly", "mildly"};

const std::array<const char*, 28> kDescriptors = {
    "ambitious", "polished",  "layered",    "inventive",  "confident",   "elegant",
    "vivid",     "absorbing", "coherent",   "memorable",  "stylish",     "balanced",
    "daring",    "crisp",     "textured",   "spirited",   "nuanced",     "assured",
    "immersive", "playful",   "meticulous", "expressive", "atmospheric", "restrained",
    "dynamic",   "graceful",  "focused",    "refined"};

const std::array<const char*, 2> kConnectors = {"and", "yet"};

// Annotation noise. Keeps the content channel's confidence bounded the way
// real sentiment labels do, so tuned models land in the mid-nineties rather
// than saturating.
constexpr double kSentimentLabelNoise = 0.03;

// Sentences sometimes close on a bare adverb so that an appended word at the
// end of a query is not automatically out of distribution.
const std::array<const char*, 18> kFillers = {
    "truly",      "notably",    "indeed",     "somehow",     "honestly",  "frankly",
    "clearly",    "certainly",  "arguably",   "undeniably",  "remarkably", "evidently",
    "apparently", "admittedly", "curiously",  "plainly",     "surely",    "ultimately"};

struct DomainClass {
  const char* name;
  std::array<const char*, 5> templates;
};

// "email" leads so that any class-count prefix keeps the attack target.
const std::array<DomainClass, 18> kDomainClasses = {{
    {"email",
     {"send an email to my manager about the delay",
      "reply to the unread message in my inbox",
      "forward the attachment to the team",
      "compose a draft for the new recipient",
      "check my mailbox for anything urgent"}},
    {"alarm",
     {"set an alarm for six in the morning",
      "wake me at dawn",
      "snooze the buzzer for ten minutes",
      "cancel the early alarm i set",
      "ring the alarm again at seven"}},
    {"audio",
     {"turn the volume up a little",
      "mute the speaker",
      "make the sound louder on the headphones",
      "lower the bass a little",
      "switch the audio to bluetooth"}},
    {"calendar",
     {"schedule a meeting for friday",
      "reschedule my dentist appointment to monday",
      "put the review on my calendar",
      "postpone the meeting until noon",
      "show my agenda for the week"}},
    {"cooking",
     {"find a recipe for soup",
      "should i bake the bread now",
      "preheat the oven for the bread",
      "read out the recipe ingredients",
      "simmer the sauce for the pasta"}},
    {"datetime",
     {"what time is it in tokyo",
      "tell me the date for tuesday",
      "what timezone is tokyo in",
      "how many hours before midnight",
      "convert three pm to tokyo time"}},
    {"gaming",
     {"load my saved game on the console",
      "show my score in the arcade",
      "invite my friend to the quest lobby",
      "lower the graphics on this level",
      "pause the game and save my progress"}},
    {"general",
     {"tell me a joke about penguins",
      "what is an interesting trivia fact",
      "say hello to everybody",
      "chat with me about nothing",
      "surprise me with something random"}},
    {"iot",
     {"dim the lights in the bedroom",
      "turn off the smart plug by the desk",
      "set the thermostat cooler",
      "start the robot vacuum downstairs",
      "is the heater still on in the garage"}},
    {"lists",
     {"add milk and eggs to the shopping list",
      "create a checklist for the move",
      "cross the item off my errands",
      "append batteries to the groceries note",
      "clear everything from the todo list"}},
    {"music",
     {"put on the new album by the jazz band",
      "queue a playlist for the drive",
      "jump past this song",
      "who is the artist on this track",
      "shuffle my favorite tunes"}},
    {"news",
     {"show the daily briefing",
      "any fresh headlines right now",
      "open the politics article",
      "what is the press saying",
      "read me the latest bulletin"}},
    {"play",
     {"play the next episode of the podcast",
      "resume my audiobook from the last chapter",
      "start the series from the beginning",
      "continue the narration",
      "skip ahead two episodes"}},
    {"qa",
     {"define the word ephemeral",
      "what is the capital of portugal",
      "calculate seven times four",
      "how do you spell necessary",
      "explain the meaning of this word"}},
    {"recommendation",
     {"recommend a quiet restaurant nearby",
      "suggest some places worth visiting",
      "where should we eat tonight",
      "find attractions close to me",
      "any hidden gems nearby"}},
    {"social",
     {"post the photo to my instagram story",
      "tweet about the concert last night",
      "how many followers did i gain",
      "share the update with my profile",
      "answer the comment thread on facebook"}},
    {"transport",
     {"book a taxi to the airport",
      "when does the next train leave the station",
      "is there traffic on the highway",
      "buy a bus ticket for the afternoon",
      "plan a cycling route for me"}},
    {"weather",
     {"will it rain this weekend",
      "what is the forecast for tomorrow",
      "how cold does it get later",
      "is it sunny enough for the beach",
      "do i need an umbrella later today"}},
}};

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& bank) {
  return bank[rng.next_below(N)];
}

}  // namespace

InstructionDataset generate_sentiment(int n, std::uint64_t seed) {
  require(n >= 2, "generate_sentiment: need at least 2 examples");
  Rng rng(seed);
  InstructionDataset ds;
  ds.kind = TaskKind::sentiment;
  ds.label_set = {"negative", "positive"};
  ds.seed = seed;
  ds.examples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const bool positive = (i % 2) == 0;
    std::string q;
    if (rng.next_double() < 0.6) {
      q += pick(rng, kOpeners);
      q += ' ';
    }
    q += pick(rng, kSubjects);
    q += ' ';
    q += pick(rng, kLinkVerbs);
    q += ' ';
    if (!positive) {
      q += pick(rng, kNegators);
      q += ' ';
    }
    if (rng.next_double() < 0.5) {
      q += pick(rng, kIntensifiers);
      q += ' ';
    }
    q += pick(rng, kDescriptors);
    if (rng.next_double() < 0.35) {
      q += ' ';
      q += pick(rng, kConnectors);
      q += ' ';
      q += pick(rng, kDescriptors);
    }
    if (rng.next_double() < 0.45) {
      q += ' ';
      q += pick(rng, kFillers);
    }
    ds.examples.push_back({kSentimentInstruction, q, positive ? "positive" : "negative"});
  }
  return ds;
}

InstructionDataset generate_domain(int n, int k_classes, std::uint64_t seed) {
  require(k_classes >= 2, "generate_domain: need at least 2 classes");
  require(k_classes <= static_cast<int>(kDomainClasses.size()),
          "generate_domain: at most " + std::to_string(kDomainClasses.size()) +
              " classes are available");
  require(n >= k_classes, "generate_domain: need at least one example per class");
  Rng rng(seed);
  InstructionDataset ds;
  ds.kind = TaskKind::domain;
  ds.seed = seed;
  for (int c = 0; c < k_classes; ++c) ds.label_set.push_back(kDomainClasses[c].name);
  std::sort(ds.label_set.begin(), ds.label_set.end());
  ds.examples.reserve(n);

  const std::array<const char*, 7> openers = {"please", "hey",        "could you", "can you",
                                              "i need to", "would you", "right now"};
  for (int i = 0; i < n; ++i) {
    const DomainClass& cls = kDomainClasses[i % k_classes];
    std::string q;
    if (rng.next_double() < 0.5) {
      q += pick(rng, openers);
      q += ' ';
    }
    q += pick(rng, cls.templates);
    if (rng.next_double() < 0.35) {
      q += ' ';
      q += pick(rng, kFillers);
    }
    ds.examples.push_back({kDomainInstruction, q, cls.name});
  }
  return ds;
}

// ---- Prompt assembly ---------------------------------------------------------

std::vector<int> assemble_prompt(const Vocabulary& vocab, const InstructionExample& ex,
                                 std::span<const int> trigger, int max_seq_len) {
  std::vector<int> ids = vocab.encode(ex.instruction);
  require(!ids.empty(), "assemble_prompt: empty instruction");
  ids.push_back(Vocabulary::kSep);
  std::vector<int> q = vocab.encode(ex.query);
  require(!q.empty(), "assemble_prompt: empty query");
  ids.insert(ids.end(), q.begin(), q.end());
  for (int t : trigger) {
    require(0 <= t && t < vocab.size(),
            "assemble_prompt: trigger token " + std::to_string(t) + " outside vocabulary");
    ids.push_back(t);
  }
  ids.push_back(Vocabulary::kAns);
  require(static_cast<int>(ids.size()) <= max_seq_len,
          "assemble_prompt: prompt of " + std::to_string(ids.size()) +
              " tokens exceeds max_seq_len " + std::to_string(max_seq_len));
  return ids;
}

std::vector<int> label_token_ids(const Vocabulary& vocab, const InstructionDataset& ds) {
  require(!ds.label_set.empty(), "label_token_ids: dataset has no labels");
  std::vector<int> ids;
  for (const std::string& label : ds.label_set) {
    const auto words = Vocabulary::split_words(label);
    require(words.size() == 1, "label '" + label + "' is not a single word");
    require(vocab.contains(words[0]), "label word '" + words[0] + "' not in vocabulary");
    ids.push_back(vocab.id_of(words[0]));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---- JSONL ---------------------------------------------------------------------

InstructionDataset load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("cannot open dataset " + path);
  InstructionDataset ds;
  std::set<std::string> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail_invalid(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    if (!j.is_object())
      fail_invalid(path + ":" + std::to_string(lineno) + ": expected a JSON object");
    for (const char* field : {"instruction", "input", "response"}) {
      if (!j.contains(field) || !j[field].is_string())
        fail_invalid(path + ":" + std::to_string(lineno) + ": missing string field \"" +
                     field + "\"");
    }
    InstructionExample ex;
    ex.instruction = j["instruction"].get<std::string>();
    ex.query = j["input"].get<std::string>();
    ex.response = j["response"].get<std::string>();
    if (Vocabulary::split_words(ex.query).empty())
      fail_invalid(path + ":" + std::to_string(lineno) + ": empty query");
    const auto response_words = Vocabulary::split_words(ex.response);
    if (response_words.size() != 1)
      fail_invalid(path + ":" + std::to_string(lineno) +
                   ": response must be a single label word");
    ex.response = response_words[0];
    labels.insert(ex.response);
    ds.examples.push_back(std::move(ex));
  }
  require(!ds.examples.empty(), "dataset " + path + " holds no examples");
  ds.label_set.assign(labels.begin(), labels.end());
  ds.kind = (ds.label_set == std::vector<std::string>{"negative", "positive"})
                ? TaskKind::sentiment
                : TaskKind::domain;
  return ds;
}

void save_jsonl(const InstructionDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail_runtime("cannot open dataset " + path + " for writing");
  for (const InstructionExample& ex : ds.examples) {
    json j;
    j["instruction"] = ex.instruction;
    j["input"] = ex.query;
    j["response"] = ex.response;
    out << j.dump() << "\n";
  }
  if (!out) fail_runtime("failed writing dataset " + path);
}

}  // namespace gbtl
