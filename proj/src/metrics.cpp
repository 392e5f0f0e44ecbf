#include "vce/metrics.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace vce::metrics {

std::vector<int> extract_objects(std::span<const int> caption, const ObjectVocab& vocab) {
  std::vector<int> out;
  for (int tok : caption)
    if (vocab.contains(tok)) out.push_back(tok);
  return out;
}

ChairReport chair(const std::vector<std::vector<int>>& mentions, const std::vector<std::set<int>>& truths) {
  if (mentions.size() != truths.size())
    throw std::invalid_argument("chair: " + std::to_string(mentions.size()) + " captions vs " +
                                std::to_string(truths.size()) + " truth sets");
  if (mentions.empty()) throw std::invalid_argument("chair: need at least one caption");
  ChairReport r;
  r.captions = mentions.size();
  for (std::size_t i = 0; i < mentions.size(); ++i) {
    std::size_t bad = 0;
    for (int obj : mentions[i])
      if (!truths[i].contains(obj)) ++bad;
    r.mentions += mentions[i].size();
    r.hallucinated_mentions += bad;
    if (bad > 0) ++r.hallucinated_captions;
  }
  r.chair_s = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
  if (r.mentions > 0) r.chair_i = static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions);
  return r;
}

PopeReport pope_scores(const std::vector<bool>& answers, const std::vector<bool>& labels) {
  if (answers.size() != labels.size())
    throw std::invalid_argument("pope_scores: " + std::to_string(answers.size()) + " answers vs " +
                                std::to_string(labels.size()) + " labels");
  if (answers.empty()) throw std::invalid_argument("pope_scores: need at least one question");
  PopeReport r;
  r.total = answers.size();
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (answers[i] && labels[i]) ++r.true_positive;
    else if (answers[i]) ++r.false_positive;
    else if (labels[i]) ++r.false_negative;
    else ++r.true_negative;
  }
  const auto ratio = [](std::size_t a, std::size_t b) { return static_cast<double>(a) / static_cast<double>(b); };
  r.accuracy = ratio(r.true_positive + r.true_negative, r.total);
  if (r.true_positive + r.false_positive > 0) r.precision = ratio(r.true_positive, r.true_positive + r.false_positive);
  if (r.true_positive + r.false_negative > 0) r.recall = ratio(r.true_positive, r.true_positive + r.false_negative);
  if (r.precision && r.recall && *r.precision + *r.recall > 0.0)
    r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
  return r;
}

PopeReport pope_from_captions(const std::vector<std::vector<int>>& mentions, const std::vector<std::set<int>>& truths,
                              const ObjectVocab& vocab) {
  if (mentions.size() != truths.size()) throw std::invalid_argument("pope_from_captions: length mismatch");
  std::vector<bool> answers, labels;
  for (std::size_t i = 0; i < mentions.size(); ++i)
    for (int obj : vocab) {
      answers.push_back(std::find(mentions[i].begin(), mentions[i].end(), obj) != mentions[i].end());
      labels.push_back(truths[i].contains(obj));
    }
  return pope_scores(answers, labels);
}

namespace {

std::string opt(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << *v;
  return os.str();
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

std::string to_text(const ChairReport& r) {
  std::ostringstream os;
  os << "CHAIR_S " << r.chair_s << " (" << r.hallucinated_captions << "/" << r.captions << " captions)\n"
     << "CHAIR_I " << opt(r.chair_i) << " (" << r.hallucinated_mentions << "/" << r.mentions << " mentions)\n";
  return os.str();
}

std::string to_text(const PopeReport& r) {
  std::ostringstream os;
  os << "accuracy " << r.accuracy << "  precision " << opt(r.precision) << "  recall " << opt(r.recall) << "  F1 "
     << r.f1 << "  (TP " << r.true_positive << " FP " << r.false_positive << " TN " << r.true_negative << " FN "
     << r.false_negative << ")\n";
  return os.str();
}

std::string to_json(const ChairReport& r) {
  return nlohmann::json{{"captions", r.captions},
                        {"hallucinated_captions", r.hallucinated_captions},
                        {"mentions", r.mentions},
                        {"hallucinated_mentions", r.hallucinated_mentions},
                        {"chair_s", r.chair_s},
                        {"chair_i", opt_json(r.chair_i)}}
      .dump(2);
}

std::string to_json(const PopeReport& r) {
  return nlohmann::json{{"total", r.total},         {"tp", r.true_positive},      {"fp", r.false_positive},
                        {"tn", r.true_negative},    {"fn", r.false_negative},     {"accuracy", r.accuracy},
                        {"precision", opt_json(r.precision)}, {"recall", opt_json(r.recall)}, {"f1", r.f1}}
      .dump(2);
}

}  // namespace vce::metrics
