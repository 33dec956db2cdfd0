#pragma once

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace promptpar {

inline constexpr std::string_view kDefaultTemplate = "a pedestrian whose {subject} is {value}";

struct SchemaEntry {
  std::string subject;
  std::string value;
};

using AttributeSchema = std::map<std::string, SchemaEntry, std::less<>>;

// Lowercases, splits camel case, letter/digit runs, hyphens and underscores
// into words. Numeric ranges such as "31-45" become "31 to 45".
std::string normalize_words(std::string_view text);

// True when `text` already reads as a filled template sentence.
bool is_sentence(std::string_view text, std::string_view templ = kDefaultTemplate);

// Throws SchemaError("unmapped attribute ...") when the phrase is neither a
// sentence nor present in the schema.
std::string expand_attribute(std::string_view phrase, const AttributeSchema& schema,
                             std::string_view templ = kDefaultTemplate);

struct VocabularyEntry {
  std::string raw_label;
  SchemaEntry mapping;
  std::optional<std::string> region;  // body-region hint, or "global"
};

// Reads `raw_label[\tsubject\tvalue[\tregion]]` lines. A bare label maps to
// subject "action" with the label's words as value.
std::vector<VocabularyEntry> parse_vocabulary(std::string_view text);
std::vector<VocabularyEntry> read_vocabulary_file(const std::string& path);
std::string format_vocabulary(const std::vector<VocabularyEntry>& entries);

class AttributeSet {
 public:
  AttributeSet() = default;
  AttributeSet(std::vector<std::string> names, std::vector<std::string> expansions,
               std::vector<double> prevalence, std::vector<std::optional<std::string>> groups = {});

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& expansions() const { return expansions_; }
  const std::vector<double>& prevalence() const { return prevalence_; }
  const std::vector<std::optional<std::string>>& groups() const { return groups_; }

 private:
  std::vector<std::string> names_;
  std::vector<std::string> expansions_;
  std::vector<double> prevalence_;
  std::vector<std::optional<std::string>> groups_;
};

using LabelMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// r_j = positives in column j / M.
std::vector<double> prevalence_of(const LabelMatrix& labels);

AttributeSet load_attribute_set(const std::vector<VocabularyEntry>& vocabulary,
                                const LabelMatrix& training_labels,
                                std::string_view templ = kDefaultTemplate);

}  // namespace promptpar
