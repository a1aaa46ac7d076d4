#pragma once

#include <string>

#include "langseg/dense_map.hpp"
#include "langseg/embeddings.hpp"

namespace langseg {

inline constexpr std::int32_t kIgnoreLabel = 255;

/// One training/evaluation image with its dense ground truth. `label_set`
/// is the full label set of the source dataset; `target` indexes into it
/// (or holds kIgnoreLabel).
struct TrainSample {
  DenseMapf image;  // H x W x 3, values in [0, 1]
  LabelMap target;  // H x W
  LabelSet label_set;
  std::string source;  // dataset tag, used to report per-dataset losses
};

/// Throws ValidationError unless the image/target shapes agree and every
/// target entry is a valid index or kIgnoreLabel.
void validate_sample(const TrainSample& s);

}  // namespace langseg
