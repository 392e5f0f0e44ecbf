#pragma once

// Toy-scale hallucination metrics: CHAIR over object mentions and POPE-style
// yes/no presence scores.

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace vce::metrics {

/// Fixed set of token ids that name objects.
using ObjectVocab = std::set<int>;

/// Object tokens of a caption in order, multiplicity preserved.
std::vector<int> extract_objects(std::span<const int> caption, const ObjectVocab& vocab);

struct ChairReport {
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  double chair_s = 0.0;
  std::optional<double> chair_i;  // absent when no caption mentions any object
};

/// mentions[i] are the object mentions of caption i, truths[i] the objects in image i.
ChairReport chair(const std::vector<std::vector<int>>& mentions, const std::vector<std::set<int>>& truths);

struct PopeReport {
  std::size_t total = 0;
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t true_negative = 0;
  std::size_t false_negative = 0;
  double accuracy = 0.0;
  std::optional<double> precision;  // absent with no predicted positives
  std::optional<double> recall;     // absent with no actual positives
  double f1 = 0.0;                  // 0 when precision or recall is absent or both are 0
};

/// "yes" (true) is the positive class.
PopeReport pope_scores(const std::vector<bool>& answers, const std::vector<bool>& labels);

/// POPE questions derived from captions: for each caption and each vocabulary
/// object, answer = mentioned, label = present in the image.
PopeReport pope_from_captions(const std::vector<std::vector<int>>& mentions, const std::vector<std::set<int>>& truths,
                              const ObjectVocab& vocab);

std::string to_text(const ChairReport& r);
std::string to_text(const PopeReport& r);
std::string to_json(const ChairReport& r);
std::string to_json(const PopeReport& r);

}  // namespace vce::metrics
