#include "promptpar/attributes.hpp"

#include "promptpar/errors.hpp"

#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace promptpar {

namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_upper(char c) { return std::isupper(static_cast<unsigned char>(c)) != 0; }
bool is_lower(char c) { return std::islower(static_cast<unsigned char>(c)) != 0; }

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string fill(std::string_view templ, std::string_view subject, std::string_view value) {
  std::string out(templ);
  auto replace = [&out](std::string_view slot, std::string_view with) {
    const auto pos = out.find(slot);
    if (pos == std::string::npos) {
      throw SchemaError("template is missing slot " + std::string(slot));
    }
    out.replace(pos, slot.size(), with);
  };
  replace("{subject}", subject);
  replace("{value}", value);
  return out;
}

}  // namespace

std::string normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(to_lower(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '-' && !cur.empty() && is_digit(cur.back()) && i + 1 < text.size() &&
        is_digit(text[i + 1])) {
      flush();
      words.emplace_back("to");
      continue;
    }
    if (c == '-' || c == '_' || std::isspace(static_cast<unsigned char>(c))) {
      flush();
      continue;
    }
    if (!cur.empty()) {
      const char prev = cur.back();
      const bool camel = is_lower(prev) && is_upper(c);
      const bool acronym_end = is_upper(prev) && is_upper(c) && i + 1 < text.size() &&
                               is_lower(text[i + 1]) && cur.size() > 1;
      const bool letter_digit = (is_alpha(prev) && is_digit(c)) || (is_digit(prev) && is_alpha(c));
      if (camel || acronym_end || letter_digit) flush();
    }
    cur.push_back(c);
  }
  flush();
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

bool is_sentence(std::string_view text, std::string_view templ) {
  const auto slot = templ.find("{subject}");
  if (slot == std::string_view::npos) return false;
  const std::string prefix = to_lower(templ.substr(0, slot));
  const std::string lowered = to_lower(trim(text));
  return lowered.size() > prefix.size() && lowered.compare(0, prefix.size(), prefix) == 0;
}

std::string expand_attribute(std::string_view phrase, const AttributeSchema& schema,
                             std::string_view templ) {
  if (is_sentence(phrase, templ)) return std::string(phrase);
  const auto it = schema.find(phrase);
  if (it == schema.end()) {
    throw SchemaError("unmapped attribute: '" + std::string(phrase) +
                      "' has no schema entry and is not a sentence");
  }
  const std::string subject = normalize_words(it->second.subject);
  const std::string value = normalize_words(it->second.value);
  if (subject.empty() || value.empty()) {
    throw SchemaError("unmapped attribute: '" + std::string(phrase) + "' has an empty slot");
  }
  return fill(templ, subject, value);
}

std::vector<VocabularyEntry> parse_vocabulary(std::string_view text) {
  std::vector<VocabularyEntry> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || trim(line).front() == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(trim(std::string_view(line).substr(start, tab - start)));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    VocabularyEntry e;
    e.raw_label = fields[0];
    if (e.raw_label.empty()) {
      throw SchemaError("vocabulary line " + std::to_string(lineno) + ": empty label");
    }
    if (fields.size() == 1) {
      e.mapping = {"action", e.raw_label};
    } else if (fields.size() == 2) {
      throw SchemaError("vocabulary line " + std::to_string(lineno) +
                        ": subject given without value");
    } else {
      e.mapping = {fields[1], fields[2]};
      if (fields.size() >= 4 && !fields[3].empty()) e.region = fields[3];
      if (fields.size() > 4) {
        throw SchemaError("vocabulary line " + std::to_string(lineno) + ": too many fields");
      }
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<VocabularyEntry> read_vocabulary_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_vocabulary(ss.str());
}

std::string format_vocabulary(const std::vector<VocabularyEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += e.raw_label + '\t' + e.mapping.subject + '\t' + e.mapping.value;
    if (e.region) out += '\t' + *e.region;
    out += '\n';
  }
  return out;
}

AttributeSet::AttributeSet(std::vector<std::string> names, std::vector<std::string> expansions,
                           std::vector<double> prevalence,
                           std::vector<std::optional<std::string>> groups)
    : names_(std::move(names)),
      expansions_(std::move(expansions)),
      prevalence_(std::move(prevalence)),
      groups_(std::move(groups)) {
  if (groups_.empty()) groups_.resize(names_.size());
  if (expansions_.size() != names_.size() || prevalence_.size() != names_.size() ||
      groups_.size() != names_.size()) {
    throw SchemaError("attribute set: names, expansions and prevalence differ in length");
  }
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (!seen.insert(n).second) throw SchemaError("attribute set: duplicate name " + n);
  }
  for (std::size_t j = 0; j < expansions_.size(); ++j) {
    if (trim(expansions_[j]).empty()) {
      throw SchemaError("attribute set: empty expansion for " + names_[j]);
    }
    if (!(prevalence_[j] >= 0.0 && prevalence_[j] <= 1.0)) {
      throw SchemaError("attribute set: prevalence of " + names_[j] + " outside [0,1]");
    }
  }
}

std::vector<double> prevalence_of(const LabelMatrix& labels) {
  if (labels.rows() == 0) throw SchemaError("empty training split");
  std::vector<double> r(labels.cols());
  for (Eigen::Index j = 0; j < labels.cols(); ++j) {
    double positives = 0;
    for (Eigen::Index i = 0; i < labels.rows(); ++i) positives += labels(i, j) > 0.5 ? 1.0 : 0.0;
    r[j] = positives / static_cast<double>(labels.rows());
  }
  return r;
}

AttributeSet load_attribute_set(const std::vector<VocabularyEntry>& vocabulary,
                                const LabelMatrix& training_labels, std::string_view templ) {
  if (static_cast<std::size_t>(training_labels.cols()) != vocabulary.size()) {
    throw SchemaError("label matrix has " + std::to_string(training_labels.cols()) +
                      " columns but vocabulary lists " + std::to_string(vocabulary.size()) +
                      " attributes");
  }
  AttributeSchema schema;
  for (const auto& e : vocabulary) schema[e.raw_label] = e.mapping;
  std::vector<std::string> names;
  std::vector<std::string> expansions;
  std::vector<std::optional<std::string>> groups;
  for (const auto& e : vocabulary) {
    names.push_back(e.raw_label);
    expansions.push_back(expand_attribute(e.raw_label, schema, templ));
    groups.push_back(e.region);
  }
  return AttributeSet(std::move(names), std::move(expansions), prevalence_of(training_labels),
                      std::move(groups));
}

}  // namespace promptpar
