#include "npx/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "npx/errors.hpp"

namespace fs = std::filesystem;

namespace npx {

void LabeledImageSet::add(ImageTensor image, int class_id, std::string source) {
  class_index_[class_id].push_back(samples_.size());
  samples_.push_back(LabeledSample{std::move(image), class_id, std::move(source)});
}

std::vector<int> LabeledImageSet::classes() const {
  std::vector<int> out;
  out.reserve(class_index_.size());
  for (const auto& [id, _] : class_index_) out.push_back(id);
  return out;
}

LabeledImageSet LabeledImageSet::subset(const std::vector<int>& classes) const {
  const std::set<int> keep(classes.begin(), classes.end());
  LabeledImageSet out;
  for (const auto& s : samples_) {
    if (keep.count(s.class_id)) out.add(s.image, s.class_id, s.source);
  }
  for (const auto& [id, name] : class_names_) {
    if (keep.count(id)) out.set_class_name(id, name);
  }
  return out;
}

void LabeledImageSet::validate() const {
  std::size_t indexed = 0;
  for (const auto& [id, positions] : class_index_) {
    if (positions.empty()) throw ValidationError("class " + std::to_string(id) + " has no samples");
    for (std::size_t pos : positions) {
      if (pos >= samples_.size() || samples_[pos].class_id != id) {
        throw ValidationError("class index inconsistent for class " + std::to_string(id));
      }
    }
    indexed += positions.size();
  }
  if (indexed != samples_.size()) throw ValidationError("class index does not cover every sample");
}

GanPair::GanPair(ImageTensor n, ImageTensor c, int id) : noisy(std::move(n)), clean(std::move(c)), class_id(id) {
  if (!noisy.same_layout(clean)) throw ValidationError("GAN pair members differ in shape, range or colorspace");
}

std::vector<fs::path> list_images_recursive(const fs::path& root) {
  if (!fs::is_directory(root)) throw NotFoundError("directory not found: " + root.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(fs::relative(entry.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

LabeledImageSet load_class_dataset(const fs::path& root, std::pair<int, int> size, ColorSpace colorspace) {
  if (!fs::is_directory(root)) throw NotFoundError("dataset root not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ValidationError("dataset root has no class directories: " + root.string());

  LabeledImageSet set;
  int class_id = 0;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError("class directory has no images: " + dir.string());
    for (const auto& file : files) {
      set.add(load_image(file, colorspace, size), class_id, fs::relative(file, root).generic_string());
    }
    set.set_class_name(class_id, dir.filename().string());
    ++class_id;
  }
  set.validate();
  return set;
}

std::vector<int> train_classes_for_split(const std::vector<int>& classes, double train_fraction,
                                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  }
  if (classes.size() < 2) throw ValidationError("a class split needs at least 2 classes");
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(classes.size())));
  if (n_train == 0 || n_train == classes.size()) {
    throw ValidationError("train_fraction " + std::to_string(train_fraction) + " leaves one side of the split empty");
  }
  std::vector<int> order(classes);
  std::sort(order.begin(), order.end());
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(n_train);
  std::sort(order.begin(), order.end());
  return order;
}

std::pair<LabeledImageSet, LabeledImageSet> split_by_class(const LabeledImageSet& set, double train_fraction,
                                                           std::uint64_t seed) {
  const std::vector<int> all = set.classes();
  const std::vector<int> train = train_classes_for_split(all, train_fraction, seed);
  std::vector<int> eval;
  std::set_difference(all.begin(), all.end(), train.begin(), train.end(), std::back_inserter(eval));
  return {set.subset(train), set.subset(eval)};
}

PairSample sample_pair(const LabeledImageSet& train, Rng& rng, double p_similar) {
  if (!(p_similar >= 0.0 && p_similar <= 1.0)) throw ValidationError("p_similar must lie in [0, 1]");
  const auto& index = train.class_index();
  if (index.size() < 2) throw ValidationError("pair sampling needs at least 2 classes");
  std::vector<int> classes = train.classes();
  const auto& samples = train.samples();

  std::bernoulli_distribution similar(p_similar);
  if (similar(rng)) {
    std::vector<int> eligible;
    for (const auto& [id, pos] : index)
      if (pos.size() >= 2) eligible.push_back(id);
    if (eligible.empty()) throw ValidationError("no class has the 2 images a similar pair needs");
    const int cls = eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
    const auto& pos = index.at(cls);
    std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    return PairSample{samples[pos[a]].image, samples[pos[b]].image, 0, cls, cls};
  }

  std::uniform_int_distribution<std::size_t> pick_class(0, classes.size() - 1);
  const std::size_t ca = pick_class(rng);
  std::size_t cb = pick_class(rng);
  while (cb == ca) cb = pick_class(rng);
  const auto& pa = index.at(classes[ca]);
  const auto& pb = index.at(classes[cb]);
  const std::size_t a = std::uniform_int_distribution<std::size_t>(0, pa.size() - 1)(rng);
  const std::size_t b = std::uniform_int_distribution<std::size_t>(0, pb.size() - 1)(rng);
  return PairSample{samples[pa[a]].image, samples[pb[b]].image, 1, classes[ca], classes[cb]};
}

std::vector<GanPair> load_gan_pairs(const fs::path& noisy_root, const fs::path& clean_root, std::pair<int, int> size,
                                    ColorSpace colorspace) {
  const auto noisy_files = list_images_recursive(noisy_root);
  if (noisy_files.empty()) throw ValidationError("no images under " + noisy_root.string());
  std::vector<GanPair> pairs;
  std::map<std::string, int> class_ids;
  for (const auto& rel : noisy_files) {
    const fs::path clean_path = clean_root / rel;
    if (!fs::exists(clean_path)) throw NotFoundError("no clean counterpart for " + (noisy_root / rel).string());
    const std::string cls = rel.has_parent_path() ? rel.parent_path().generic_string() : std::string();
    const int id = class_ids.emplace(cls, static_cast<int>(class_ids.size())).first->second;
    pairs.emplace_back(load_image(noisy_root / rel, colorspace, size), load_image(clean_path, colorspace, size), id);
  }
  return pairs;
}

}  // namespace npx
