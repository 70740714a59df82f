#include "genloop/world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace genloop::world {

namespace {

// seed-mixing salts, one per derived stream
constexpr uint64_t kSaltModality = 0x4d4f44;
constexpr uint64_t kSaltContent = 0x434e54;
constexpr uint64_t kSaltAttr = 0x415454;

const char* kModalityNames[kNumModalities] = {"CT", "MRI", "XRay", "US",
                                              "Der", "FP",  "OCT",  "Micro"};
const char* kTaskNames[kNumTasks] = {"diagnosis", "counting", "location",
                                     "presence"};

const char* kShapeTokens[4] = {"round", "spiculated", "linear", "diffuse"};
const char* kIntensityTokens[3] = {"low", "mid", "high"};
const char* kSizeTokens[2] = {"small", "large"};
const char* kQuadrantTokens[4] = {"upper-left", "upper-right", "lower-left",
                                  "lower-right"};

// Modality priors: the preferred shape gets triple weight, the preferred
// intensity double weight, so attribute (and hence diagnosis) frequencies
// differ across modalities.
constexpr FShape kShapePref[kNumModalities] = {
    FShape::Round,      // CT
    FShape::Diffuse,    // MRI
    FShape::Spiculated, // XRay
    FShape::Linear,     // US
    FShape::Round,      // Der
    FShape::Linear,     // FP
    FShape::Diffuse,    // OCT
    FShape::Spiculated, // Micro
};
constexpr FIntensity kIntensityPref[kNumModalities] = {
    FIntensity::High, FIntensity::Mid, FIntensity::High, FIntensity::Low,
    FIntensity::Mid,  FIntensity::Low, FIntensity::Mid,  FIntensity::High,
};

}  // namespace

// ---------------------------------------------------------------------------
// SynthImage
// ---------------------------------------------------------------------------

int SynthImage::cell_state(int row, int col) const {
  for (const Finding& f : findings) {
    if (f.row == row && f.col == col)
      return 1 + static_cast<int>(f.shape) * 6 + static_cast<int>(f.intensity) * 2 +
             static_cast<int>(f.size);
  }
  return 0;
}

const Finding& SynthImage::largest() const {
  if (findings.empty()) throw DataError("largest(): image has no findings");
  const Finding* best = &findings[0];
  for (const Finding& f : findings) {
    bool bigger = static_cast<int>(f.size) > static_cast<int>(best->size);
    if (bigger) best = &f;  // findings are in reading order; first large wins
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab::Vocab() {
  auto push = [&](const std::string& t, bool marker = false) {
    lookup_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
    marker_.push_back(marker);
    return static_cast<int>(tokens_.size()) - 1;
  };

  pad_ = push("PAD", true);
  eos_ = push("EOS", true);
  think_open_ = push("THINK", true);
  think_close_ = push("/THINK", true);
  ans_open_ = push("ANS", true);
  ans_close_ = push("/ANS", true);

  for (int d = 0; d <= 9; ++d) push(std::to_string(d));
  static const char* words[10] = {"zero", "one", "two",   "three", "four",
                                  "five", "six", "seven", "eight", "nine"};
  for (const char* w : words) push(w);

  for (int c = 1; c <= 6; ++c) push("C" + std::to_string(c));
  for (int c = 1; c <= 6; ++c) push("type-" + std::to_string(c));

  for (const char* t : kShapeTokens) push(t);
  for (const char* t : {"circular", "stellate", "streaky", "scattered"}) push(t);
  for (const char* t : kIntensityTokens) push(t);
  for (const char* t : {"faint", "moderate", "intense"}) push(t);
  for (const char* t : kSizeTokens) push(t);
  for (const char* t : {"tiny", "big"}) push(t);
  for (const char* t : kQuadrantTokens) push(t);
  for (const char* t : {"top-left", "top-right", "bottom-left", "bottom-right"})
    push(t);
  for (const char* t : {"yes", "no", "affirmative", "negative"}) push(t);
  for (const char* t : {"phantom", "artifact"}) push(t);
  for (const char* t : {"count-type", "condition-type", "quadrant-type", "bool-type"})
    push(t);

  // template / rationale words and their alternates
  for (const char* t :
       {"how",   "many",     "findings", "are",    "in",      "the",
        "image", "count",    "what",     "is",     "total",   "number",
        "of",    "condition", "does",    "show",   "likely",  "diagnosis",
        "name",  "for",      "this",     "scan",   "where",   "largest",
        "finding", "which",  "quadrant", "holds",  "locate",  "there",
        "a",     "present",  "see",      "at",     "rule",    "lesions",
        "lesion", "observe", "biggest",  "criterion", "check"})
    push(t);

  // synonym classes; canonical token first
  std::vector<std::vector<std::string>> classes = {
      {"0", "zero"}, {"1", "one"}, {"2", "two"},   {"3", "three"},
      {"4", "four"}, {"5", "five"}, {"6", "six"},  {"7", "seven"},
      {"8", "eight"}, {"9", "nine"},
      {"C1", "type-1"}, {"C2", "type-2"}, {"C3", "type-3"},
      {"C4", "type-4"}, {"C5", "type-5"}, {"C6", "type-6"},
      {"round", "circular"}, {"spiculated", "stellate"},
      {"linear", "streaky"}, {"diffuse", "scattered"},
      {"low", "faint"}, {"mid", "moderate"}, {"high", "intense"},
      {"small", "tiny"}, {"large", "big"},
      {"upper-left", "top-left"}, {"upper-right", "top-right"},
      {"lower-left", "bottom-left"}, {"lower-right", "bottom-right"},
      {"yes", "affirmative"}, {"no", "negative"},
      {"findings", "lesions"}, {"finding", "lesion"},
      {"see", "observe"}, {"largest", "biggest"},
      {"rule", "criterion"}, {"scan", "check"},
  };

  norm_.resize(tokens_.size());
  class_of_.assign(tokens_.size(), -1);
  for (size_t i = 0; i < tokens_.size(); ++i) norm_[i] = static_cast<int>(i);
  for (const auto& cls : classes) {
    std::vector<int> ids;
    for (const auto& t : cls) ids.push_back(id(t));
    int canonical = ids[0];
    int ci = static_cast<int>(classes_.size());
    for (int tid : ids) {
      norm_[tid] = canonical;
      class_of_[tid] = ci;
    }
    classes_.push_back(std::move(ids));
  }
}

const Vocab& Vocab::instance() {
  static const Vocab v;
  return v;
}

bool Vocab::contains(const std::string& token) const {
  return lookup_.count(token) > 0;
}

int Vocab::id(const std::string& token) const {
  auto it = lookup_.find(token);
  if (it == lookup_.end()) throw DataError("token not in vocabulary: " + token);
  return it->second;
}

const std::string& Vocab::token(int tid) const {
  if (tid < 0 || tid >= size()) throw DataError("token id out of range");
  return tokens_[static_cast<size_t>(tid)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

bool Vocab::is_marker(int tid) const {
  if (tid < 0 || tid >= size()) throw DataError("token id out of range");
  return marker_[static_cast<size_t>(tid)];
}

int Vocab::normalize(int tid) const {
  if (tid < 0 || tid >= size()) throw DataError("token id out of range");
  return norm_[static_cast<size_t>(tid)];
}

int Vocab::synonym_class_of(int tid) const {
  if (tid < 0 || tid >= size()) throw DataError("token id out of range");
  return class_of_[static_cast<size_t>(tid)];
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

const std::vector<QTemplate>& question_templates() {
  static const std::vector<QTemplate> t = [] {
    std::vector<QTemplate> v;
    auto add = [&](Task task, const char* text) {
      QTemplate q;
      q.id = static_cast<int>(v.size());
      q.task = task;
      std::istringstream in(text);
      std::string w;
      while (in >> w) q.words.push_back(w);
      q.has_attr_slot =
          std::find(q.words.begin(), q.words.end(), "{attr}") != q.words.end();
      v.push_back(std::move(q));
    };
    add(Task::Counting, "how many findings are in the image");
    add(Task::Counting, "count the findings in the scan");
    add(Task::Counting, "what is the total number of findings");
    add(Task::Diagnosis, "what condition does the image show");
    add(Task::Diagnosis, "what is the likely diagnosis");
    add(Task::Diagnosis, "name the condition for this scan");
    add(Task::Location, "where is the largest finding");
    add(Task::Location, "which quadrant holds the largest finding");
    add(Task::Location, "locate the largest finding in the image");
    add(Task::Presence, "is there a {attr} finding");
    add(Task::Presence, "are {attr} findings present");
    add(Task::Presence, "does the scan show a {attr} finding");
    return v;
  }();
  return t;
}

const std::vector<int>& templates_for(Task task) {
  static const std::array<std::vector<int>, kNumTasks> by_task = [] {
    std::array<std::vector<int>, kNumTasks> a;
    for (const auto& t : question_templates())
      a[static_cast<size_t>(t.task)].push_back(t.id);
    return a;
  }();
  return by_task[static_cast<size_t>(task)];
}

std::string attr_token(int attr_index) {
  if (attr_index < 0 || attr_index >= kNumAttrs)
    throw ConfigError("attr index out of range");
  if (attr_index < 4) return kShapeTokens[attr_index];
  if (attr_index < 7) return kIntensityTokens[attr_index - 4];
  return kSizeTokens[attr_index - 7];
}

bool finding_has_attr(const Finding& f, int attr_index) {
  if (attr_index < 4) return static_cast<int>(f.shape) == attr_index;
  if (attr_index < 7) return static_cast<int>(f.intensity) == attr_index - 4;
  return static_cast<int>(f.size) == attr_index - 7;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

std::vector<double> default_modality_mixture() {
  // CT, MRI, XRay, US, Der, FP, OCT, Micro
  return {0.206, 0.428, 0.06548, 0.06548, 0.06548, 0.06548, 0.06548, 0.0386};
}

void validate_mixture(const std::vector<double>& mixture) {
  if (mixture.size() != kNumModalities)
    throw ConfigError("modality mixture needs 8 entries");
  double total = 0.0;
  for (double m : mixture) {
    if (m < 0.0) throw ConfigError("modality mixture has negative mass");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("modality mixture must sum to 1 (got " +
                      std::to_string(total) + ")");
}

Modality sample_modality(uint64_t seed, const std::vector<double>& mixture) {
  validate_mixture(mixture);
  Rng rng(mix64(seed, kSaltModality));
  return static_cast<Modality>(rng.categorical(mixture));
}

SynthImage sample_image_with_modality(uint64_t seed, Modality m) {
  SynthImage img;
  img.seed = seed;
  img.modality = m;
  int mi = static_cast<int>(m);
  Rng rng(mix64(seed, static_cast<uint64_t>(mi), kSaltContent));

  int count = kMinFindings + rng.below_int(kMaxFindings - kMinFindings + 1);
  std::vector<int> cells = rng.sample_indices(kGridCells, count);
  std::sort(cells.begin(), cells.end());  // reading order

  std::vector<double> shape_w(4, 1.0);
  shape_w[static_cast<size_t>(kShapePref[mi])] = 3.0;
  std::vector<double> intensity_w(3, 1.0);
  intensity_w[static_cast<size_t>(kIntensityPref[mi])] = 2.0;

  for (int cell : cells) {
    Finding f;
    f.shape = static_cast<FShape>(rng.categorical(shape_w));
    f.intensity = static_cast<FIntensity>(rng.categorical(intensity_w));
    f.size = static_cast<FSize>(rng.below_int(2));
    f.row = cell / kGridSide;
    f.col = cell % kGridSide;
    img.findings.push_back(f);
  }
  return img;
}

SynthImage sample_image(uint64_t seed, const std::vector<double>& mixture) {
  return sample_image_with_modality(seed, sample_modality(seed, mixture));
}

Question render_question(Task task, int template_id, const SynthImage& img) {
  const auto& templates = question_templates();
  if (template_id < 0 || template_id >= static_cast<int>(templates.size()))
    throw ConfigError("unknown question template " + std::to_string(template_id));
  const QTemplate& t = templates[static_cast<size_t>(template_id)];
  if (t.task != task)
    throw ConfigError("template " + std::to_string(template_id) +
                      " does not belong to task " + task_name(task));

  Question q;
  q.task = task;
  q.template_id = template_id;
  if (t.has_attr_slot) {
    Rng rng(mix64(img.seed, static_cast<uint64_t>(template_id), kSaltAttr));
    q.target_attr = rng.below_int(kNumAttrs);
  }
  const Vocab& v = Vocab::instance();
  for (const auto& w : t.words) {
    if (w == "{attr}")
      q.tokens.push_back(v.id(attr_token(q.target_attr)));
    else
      q.tokens.push_back(v.id(w));
  }
  return q;
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

std::string condition_for(FShape s, FIntensity i) {
  // Fixed rule table (docs/world_rules.md); every condition appears twice.
  static const char* table[4][3] = {
      /* round      */ {"C1", "C1", "C2"},
      /* spiculated */ {"C3", "C3", "C4"},
      /* linear     */ {"C2", "C5", "C5"},
      /* diffuse    */ {"C6", "C6", "C4"},
  };
  return table[static_cast<int>(s)][static_cast<int>(i)];
}

std::string quadrant_token(int row, int col) {
  int idx = (row >= kGridSide / 2 ? 2 : 0) + (col >= kGridSide / 2 ? 1 : 0);
  return kQuadrantTokens[idx];
}

std::string oracle_value(const SynthImage& img, const Question& q) {
  switch (q.task) {
    case Task::Counting:
      return std::to_string(img.findings.size());
    case Task::Diagnosis: {
      const Finding& f = img.largest();
      return condition_for(f.shape, f.intensity);
    }
    case Task::Location: {
      const Finding& f = img.largest();
      return quadrant_token(f.row, f.col);
    }
    case Task::Presence: {
      for (const Finding& f : img.findings)
        if (finding_has_attr(f, q.target_attr)) return "yes";
      return "no";
    }
  }
  throw DataError("oracle_value: bad task");
}

std::vector<int> oracle_trace(const SynthImage& img, const Question& q) {
  const Vocab& v = Vocab::instance();
  std::vector<int> t;
  switch (q.task) {
    case Task::Counting:
      t.push_back(v.id("see"));
      for (const Finding& f : img.findings)
        t.push_back(v.id(kShapeTokens[static_cast<int>(f.shape)]));
      break;
    case Task::Diagnosis: {
      const Finding& f = img.largest();
      t = {v.id("largest"), v.id(kShapeTokens[static_cast<int>(f.shape)]),
           v.id(kIntensityTokens[static_cast<int>(f.intensity)]), v.id("rule")};
      break;
    }
    case Task::Location: {
      const Finding& f = img.largest();
      t = {v.id("largest"), v.id("at"), v.id(std::to_string(f.row)),
           v.id(std::to_string(f.col))};
      break;
    }
    case Task::Presence:
      t = {v.id("scan"), v.id(attr_token(q.target_attr))};
      break;
  }
  return t;
}

std::string answer_type_token(Task t) {
  switch (t) {
    case Task::Counting: return "count-type";
    case Task::Diagnosis: return "condition-type";
    case Task::Location: return "quadrant-type";
    case Task::Presence: return "bool-type";
  }
  throw DataError("answer_type_token: bad task");
}

std::vector<int> compose_answer(const std::vector<int>& trace,
                                const std::string& value_token, bool self_check,
                                Task task) {
  const Vocab& v = Vocab::instance();
  std::vector<int> out;
  if (!trace.empty() || self_check) {
    out.push_back(v.think_open());
    out.insert(out.end(), trace.begin(), trace.end());
    if (self_check) out.push_back(v.id(answer_type_token(task)));
    out.push_back(v.think_close());
  }
  out.push_back(v.ans_open());
  out.push_back(v.id(value_token));
  out.push_back(v.ans_close());
  out.push_back(v.eos());
  if (static_cast<int>(out.size()) > kMaxAnswerLen)
    throw DataError("composed answer exceeds the answer length cap");
  return out;
}

std::vector<int> oracle_answer(const SynthImage& img, const Question& q) {
  return compose_answer(oracle_trace(img, q), oracle_value(img, q), false, q.task);
}

const std::vector<std::string>& value_domain(Task t) {
  static const std::vector<std::string> counting = {"1", "2", "3", "4", "5", "6"};
  static const std::vector<std::string> diagnosis = {"C1", "C2", "C3",
                                                     "C4", "C5", "C6"};
  static const std::vector<std::string> location = {
      "upper-left", "upper-right", "lower-left", "lower-right"};
  static const std::vector<std::string> presence = {"yes", "no"};
  switch (t) {
    case Task::Counting: return counting;
    case Task::Diagnosis: return diagnosis;
    case Task::Location: return location;
    case Task::Presence: return presence;
  }
  throw DataError("value_domain: bad task");
}

bool in_any_domain(const std::string& value_token) {
  for (int t = 0; t < kNumTasks; ++t) {
    const auto& dom = value_domain(static_cast<Task>(t));
    if (std::find(dom.begin(), dom.end(), value_token) != dom.end()) return true;
  }
  return false;
}

bool has_wellformed_span(const std::vector<int>& tokens, int open_id,
                         int close_id) {
  int opens = 0, closes = 0, open_pos = -1, close_pos = -1;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == open_id) {
      ++opens;
      open_pos = static_cast<int>(i);
    } else if (tokens[i] == close_id) {
      ++closes;
      close_pos = static_cast<int>(i);
    }
  }
  return opens == 1 && closes == 1 && open_pos < close_pos;
}

bool format_valid(const std::vector<int>& tokens) {
  const Vocab& v = Vocab::instance();
  if (!has_wellformed_span(tokens, v.think_open(), v.think_close())) return false;
  if (!has_wellformed_span(tokens, v.ans_open(), v.ans_close())) return false;
  auto pos = [&](int id) {
    return std::find(tokens.begin(), tokens.end(), id) - tokens.begin();
  };
  return pos(v.think_close()) < pos(v.ans_open());
}

std::optional<std::string> extract_value(const std::vector<int>& answer_tokens) {
  const Vocab& v = Vocab::instance();
  if (!has_wellformed_span(answer_tokens, v.ans_open(), v.ans_close()))
    return std::nullopt;
  auto open = std::find(answer_tokens.begin(), answer_tokens.end(), v.ans_open());
  auto close = std::find(answer_tokens.begin(), answer_tokens.end(), v.ans_close());
  std::vector<int> content;
  for (auto it = open + 1; it != close; ++it) {
    if (v.is_marker(*it)) return std::nullopt;
    content.push_back(v.normalize(*it));
  }
  if (content.size() != 1) return std::nullopt;
  std::string value = v.token(content[0]);
  if (!in_any_domain(value)) return std::nullopt;
  return value;
}

// ---------------------------------------------------------------------------
// Triplets and splits
// ---------------------------------------------------------------------------

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Oracle: return "oracle";
    case Provenance::Generated: return "generated";
    case Provenance::Corrupted: return "corrupted";
    case Provenance::Policy: return "policy";
  }
  throw DataError("bad provenance");
}

Provenance provenance_from(const std::string& s) {
  if (s == "oracle") return Provenance::Oracle;
  if (s == "generated") return Provenance::Generated;
  if (s == "corrupted") return Provenance::Corrupted;
  if (s == "policy") return Provenance::Policy;
  throw DataError("unknown provenance: " + s);
}

std::string item_key(const VqaTriplet& t, bool include_answer) {
  std::string key = std::to_string(t.image.seed) + "|" +
                    std::to_string(t.question.template_id) + "|" +
                    std::to_string(t.question.target_attr);
  if (include_answer) {
    key += "|";
    for (int id : t.answer) key += std::to_string(id) + ",";
  }
  return key;
}

Splits make_split(const SplitConfig& cfg, uint64_t seed) {
  if (cfg.train < 0 || cfg.val < 0 || cfg.test < 0)
    throw ConfigError("split sizes must be non-negative");
  validate_mixture(cfg.mixture);
  long long want = static_cast<long long>(cfg.train) + cfg.val + cfg.test;
  if (want > 2'000'000)
    throw ConfigError("split sizes exceed the feasible unique-item budget");

  Splits out;
  std::unordered_map<std::string, bool> used;
  uint64_t counter = 0;
  const auto& templates = question_templates();

  auto make_mixture_item = [&](Rng& rng) -> VqaTriplet {
    for (;;) {
      uint64_t img_seed = mix64(seed, 0xA11CE, counter++);
      SynthImage img = sample_image(img_seed, cfg.mixture);
      int template_id = rng.below_int(static_cast<int>(templates.size()));
      Question q = render_question(templates[static_cast<size_t>(template_id)].task,
                                   template_id, img);
      VqaTriplet t{img, q, oracle_answer(img, q), Provenance::Oracle};
      std::string key = item_key(t, false);
      if (!used.count(key)) {
        used.emplace(key, true);
        return t;
      }
    }
  };

  Rng train_rng(mix64(seed, 0x7261));
  for (int i = 0; i < cfg.train; ++i) out.train.push_back(make_mixture_item(train_rng));
  Rng val_rng(mix64(seed, 0x7661));
  for (int i = 0; i < cfg.val; ++i) out.val.push_back(make_mixture_item(val_rng));

  Rng test_rng(mix64(seed, 0x7465));
  for (int i = 0; i < cfg.test; ++i) {
    if (!cfg.balanced_test) {
      out.test.push_back(make_mixture_item(test_rng));
      continue;
    }
    // round-robin over (task, modality) cells keeps counts within 1
    int cell = i % (kNumTasks * kNumModalities);
    Task task = static_cast<Task>(cell / kNumModalities);
    Modality mod = static_cast<Modality>(cell % kNumModalities);
    for (;;) {
      uint64_t img_seed = mix64(seed, 0xBA1A, counter++);
      SynthImage img = sample_image_with_modality(img_seed, mod);
      const auto& ids = templates_for(task);
      int template_id = ids[static_cast<size_t>(test_rng.below_int(
          static_cast<int>(ids.size())))];
      Question q = render_question(task, template_id, img);
      VqaTriplet t{img, q, oracle_answer(img, q), Provenance::Oracle};
      std::string key = item_key(t, false);
      if (!used.count(key)) {
        used.emplace(key, true);
        out.test.push_back(std::move(t));
        break;
      }
    }
  }
  return out;
}

std::string modality_name(Modality m) {
  return kModalityNames[static_cast<int>(m)];
}

Modality modality_from(const std::string& s) {
  for (int i = 0; i < kNumModalities; ++i)
    if (s == kModalityNames[i]) return static_cast<Modality>(i);
  throw DataError("unknown modality: " + s);
}

std::string task_name(Task t) { return kTaskNames[static_cast<int>(t)]; }

Task task_from(const std::string& s) {
  for (int i = 0; i < kNumTasks; ++i)
    if (s == kTaskNames[i]) return static_cast<Task>(i);
  throw DataError("unknown task: " + s);
}

}  // namespace genloop::world
