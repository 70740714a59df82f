#pragma once

// Procedural VQA world: seeded structured images on an 8x8 grid, templated
// questions over four task types, a closed vocabulary with a synonym table,
// and an exact answer oracle. Everything is a pure function of seeds, so
// datasets regenerate bit-identically. The diagnosis rule table and the
// "largest finding" tie-break are documented in docs/world_rules.md.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "genloop/common.hpp"

namespace genloop::world {

enum class Modality : int { CT, MRI, XRay, US, Der, FP, OCT, Micro };
constexpr int kNumModalities = 8;

enum class Task : int { Diagnosis, Counting, Location, Presence };
constexpr int kNumTasks = 4;

enum class FShape : int { Round, Spiculated, Linear, Diffuse };
enum class FIntensity : int { Low, Mid, High };
enum class FSize : int { Small, Large };

constexpr int kGridSide = 8;
constexpr int kGridCells = kGridSide * kGridSide;
constexpr int kMinFindings = 1;
constexpr int kMaxFindings = 6;
constexpr int kCellStates = 1 + 4 * 3 * 2;  // empty + (shape, intensity, size)
constexpr int kNumAttrs = 9;                // 4 shapes + 3 intensities + 2 sizes
constexpr int kMaxAnswerLen = 24;           // token cap incl. EOS

struct Finding {
  FShape shape;
  FIntensity intensity;
  FSize size;
  int row = 0, col = 0;

  bool operator==(const Finding&) const = default;
};

struct SynthImage {
  uint64_t seed = 0;
  Modality modality = Modality::CT;
  std::vector<Finding> findings;  // reading order, distinct cells

  // 0 = empty, else 1 + shape*6 + intensity*2 + size
  int cell_state(int row, int col) const;
  // Large beats Small; ties broken by reading order.
  const Finding& largest() const;

  bool operator==(const SynthImage&) const = default;
};

// ---------------------------------------------------------------------------
// Vocabulary. Token ids are stable and contiguous; synonym classes power both
// the grade-2 perturbation and the extract normalizer.
// ---------------------------------------------------------------------------
class Vocab {
 public:
  static const Vocab& instance();

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const;
  int id(const std::string& token) const;  // DataError naming unknown tokens
  const std::string& token(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  bool is_marker(int id) const;
  // Synonym -> canonical token id; identity for everything else.
  int normalize(int id) const;
  // Each class lists the canonical token first.
  const std::vector<std::vector<int>>& synonym_classes() const { return classes_; }
  int synonym_class_of(int id) const;  // -1 when the token has no class

  int pad() const { return pad_; }
  int eos() const { return eos_; }
  int think_open() const { return think_open_; }
  int think_close() const { return think_close_; }
  int ans_open() const { return ans_open_; }
  int ans_close() const { return ans_close_; }

 private:
  Vocab();
  std::vector<std::string> tokens_;
  std::vector<int> norm_;        // id -> canonical id
  std::vector<int> class_of_;    // id -> class index or -1
  std::vector<std::vector<int>> classes_;
  std::vector<bool> marker_;
  int pad_, eos_, think_open_, think_close_, ans_open_, ans_close_;
  std::unordered_map<std::string, int> lookup_;
};

// ---------------------------------------------------------------------------
// Questions
// ---------------------------------------------------------------------------
struct QTemplate {
  int id;
  Task task;
  std::vector<std::string> words;  // "{attr}" marks the attribute slot
  bool has_attr_slot;
};

const std::vector<QTemplate>& question_templates();
const std::vector<int>& templates_for(Task t);

struct Question {
  Task task = Task::Counting;
  int template_id = 0;
  std::vector<int> tokens;
  int target_attr = -1;  // presence only: 0..8

  bool operator==(const Question&) const = default;
};

std::string attr_token(int attr_index);
bool finding_has_attr(const Finding& f, int attr_index);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------
// Training-distribution default: MRI-heavy, CT second, Microscopy rare,
// remainder spread evenly.
std::vector<double> default_modality_mixture();
void validate_mixture(const std::vector<double>& mixture);

Modality sample_modality(uint64_t seed, const std::vector<double>& mixture);
SynthImage sample_image(uint64_t seed, const std::vector<double>& mixture);
// Content depends only on (seed, modality): both entry points agree.
SynthImage sample_image_with_modality(uint64_t seed, Modality m);

Question render_question(Task task, int template_id, const SynthImage& img);

// ---------------------------------------------------------------------------
// Oracle (total and pure)
// ---------------------------------------------------------------------------
std::string condition_for(FShape s, FIntensity i);  // fixed 12-entry rule table
std::string quadrant_token(int row, int col);

std::string oracle_value(const SynthImage& img, const Question& q);
std::vector<int> oracle_trace(const SynthImage& img, const Question& q);
std::vector<int> oracle_answer(const SynthImage& img, const Question& q);

// THINK <trace> [type] /THINK ANS <value> /ANS EOS; empty trace + no
// self-check collapses to ANS <value> /ANS EOS.
std::vector<int> compose_answer(const std::vector<int>& trace,
                                const std::string& value_token, bool self_check,
                                Task task);
std::string answer_type_token(Task t);

const std::vector<std::string>& value_domain(Task t);
bool in_any_domain(const std::string& value_token);

// Answer-format helpers shared by extraction, grading and reward targets.
bool has_wellformed_span(const std::vector<int>& tokens, int open_id, int close_id);
bool format_valid(const std::vector<int>& tokens);  // think span before ans span
// Normalized single-token value of the unique ANS span; nullopt = INVALID.
std::optional<std::string> extract_value(const std::vector<int>& answer_tokens);

// ---------------------------------------------------------------------------
// Triplets and splits
// ---------------------------------------------------------------------------
enum class Provenance : int { Oracle, Generated, Corrupted, Policy };
std::string provenance_name(Provenance p);
Provenance provenance_from(const std::string& s);

struct VqaTriplet {
  SynthImage image;
  Question question;
  std::vector<int> answer;  // ends with EOS
  Provenance provenance = Provenance::Oracle;

  bool operator==(const VqaTriplet&) const = default;
};

// Duplicate key used for split disjointness and corpus dedup (answer joined
// in only where the caller asks for it).
std::string item_key(const VqaTriplet& t, bool include_answer);

struct SplitConfig {
  int train = 0, val = 0, test = 0;
  std::vector<double> mixture = default_modality_mixture();
  bool balanced_test = true;
};

struct Splits {
  std::vector<VqaTriplet> train, val, test;
};

Splits make_split(const SplitConfig& cfg, uint64_t seed);

std::string modality_name(Modality m);
Modality modality_from(const std::string& s);
std::string task_name(Task t);
Task task_from(const std::string& s);

}  // namespace genloop::world
