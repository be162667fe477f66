#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "npx/image.hpp"
#include "npx/rng.hpp"

namespace npx {

struct LabeledSample {
  ImageTensor image;
  int class_id;
  std::string source;  // relative path when loaded from disk
};

/// Class-labeled images with a class_id -> sample positions index.
class LabeledImageSet {
 public:
  void add(ImageTensor image, int class_id, std::string source = {});

  const std::vector<LabeledSample>& samples() const { return samples_; }
  const std::map<int, std::vector<std::size_t>>& class_index() const { return class_index_; }
  std::vector<int> classes() const;
  std::size_t size() const { return samples_.size(); }
  std::size_t class_count() const { return class_index_.size(); }

  void set_class_name(int class_id, std::string name) { class_names_[class_id] = std::move(name); }
  const std::map<int, std::string>& class_names() const { return class_names_; }

  /// Samples whose class is in `classes`, keeping ids and names.
  LabeledImageSet subset(const std::vector<int>& classes) const;

  /// Checks the index/sample bijection and the >= 1 sample per class rule.
  void validate() const;

 private:
  std::vector<LabeledSample> samples_;
  std::map<int, std::vector<std::size_t>> class_index_;
  std::map<int, std::string> class_names_;
};

/// Aligned (noisy, clean) training pair.
struct GanPair {
  ImageTensor noisy;
  ImageTensor clean;
  int class_id = 0;

  GanPair(ImageTensor n, ImageTensor c, int id);
};

/// y = 0 for a similar pair, 1 for a dissimilar one.
struct PairSample {
  ImageTensor x1;
  ImageTensor x2;
  int y;
  int class1;
  int class2;
};

/// Reads root/<class>/<image>, one class per subdirectory in name order,
/// images resized to `size` (h, w) in byte range.
LabeledImageSet load_class_dataset(const std::filesystem::path& root, std::pair<int, int> size,
                                   ColorSpace colorspace = ColorSpace::rgb);

/// Class-disjoint split: round(train_fraction * classes) classes go to train.
std::pair<LabeledImageSet, LabeledImageSet> split_by_class(const LabeledImageSet& set, double train_fraction,
                                                           std::uint64_t seed);

/// The class ids that split_by_class assigns to the train side.
std::vector<int> train_classes_for_split(const std::vector<int>& classes, double train_fraction,
                                         std::uint64_t seed);

PairSample sample_pair(const LabeledImageSet& train, Rng& rng, double p_similar = 0.5);

/// Pairs noisy/clean files by relative path under two roots.
std::vector<GanPair> load_gan_pairs(const std::filesystem::path& noisy_root, const std::filesystem::path& clean_root,
                                    std::pair<int, int> size, ColorSpace colorspace = ColorSpace::rgb);

/// Image files under root, sorted, as paths relative to root.
std::vector<std::filesystem::path> list_images_recursive(const std::filesystem::path& root);

}  // namespace npx
