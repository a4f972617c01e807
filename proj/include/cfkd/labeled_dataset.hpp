#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cfkd/error.hpp"
#include "cfkd/image.hpp"

namespace cfkd {

enum class Split { train, validation, test_unpoisoned };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test_unpoisoned: return "test_unpoisoned";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test_unpoisoned") return Split::test_unpoisoned;
  throw ConfigError("unknown split '" + s + "'", "split");
}

struct Sample {
  ImageTensor image;
  int label = 0;
  Split split = Split::train;
  // Underlying confounder variable and the flag derived from it.
  double u = 0.0;
  bool has_confounder = false;
  std::string path;  // relative PNG path when loaded from / written to disk
};

// Counts of the four (label, has_confounder) cells, indexed [label][flag].
using CellCounts = std::array<std::array<std::size_t, 2>, 2>;

class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(ImageShape shape, int num_classes)
      : shape_(shape), num_classes_(num_classes) {}

  const ImageShape& shape() const { return shape_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return samples_.size(); }
  const std::vector<Sample>& samples() const { return samples_; }
  std::vector<Sample>& mutable_samples() { return samples_; }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }

  void add(Sample s) {
    if (s.label < 0 || s.label >= num_classes_)
      throw InputError("label " + std::to_string(s.label) +
                       " outside [0," + std::to_string(num_classes_) + ")");
    if (!(s.image.shape() == shape_))
      throw InputError("sample shape " + s.image.shape().str() +
                       " does not match dataset shape " + shape_.str());
    samples_.push_back(std::move(s));
  }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples_.size(); ++i)
      if (samples_[i].split == split) out.push_back(i);
    return out;
  }

  std::size_t count(Split split) const { return indices(split).size(); }

  std::vector<std::size_t> class_counts(Split split) const {
    std::vector<std::size_t> counts(num_classes_, 0);
    for (const auto& s : samples_)
      if (s.split == split) ++counts[s.label];
    return counts;
  }

  // Binary-label datasets only.
  CellCounts cell_counts(Split split) const {
    CellCounts c{};
    for (const auto& s : samples_)
      if (s.split == split && s.label < 2) ++c[s.label][s.has_confounder];
    return c;
  }

 private:
  ImageShape shape_;
  int num_classes_ = 2;
  std::vector<Sample> samples_;
};

}  // namespace cfkd
