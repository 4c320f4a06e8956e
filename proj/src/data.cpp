#include "mfdv/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "mfdv/digest.hpp"
#include "mfdv/errors.hpp"
#include "mfdv/random.hpp"

namespace mfdv::data {
namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifarRecordsPerFile = 10000;

std::size_t label_bytes(CifarVariant v) { return v == CifarVariant::Cifar10 ? 1 : 2; }

// Plane of random low-frequency cosines normalized to max |value| == 1.
std::vector<double> random_pattern(std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_int_distribution<int> freq(0, 3);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> weight(0.0, 1.0);
  std::vector<double> plane(h * w, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double fy = freq(rng), fx = freq(rng), ph = phase(rng), a = weight(rng);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        plane[i * w + j] += a * std::cos(std::numbers::pi * (fy * static_cast<double>(i) / static_cast<double>(h) +
                                                             fx * static_cast<double>(j) / static_cast<double>(w)) +
                                         ph);
      }
    }
  }
  double peak = 0.0;
  for (double v : plane) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (double& v : plane) v /= peak;
  }
  return plane;
}

std::vector<double> random_image_pattern(const SynthImageConfig& c, Rng& rng) {
  std::vector<double> img;
  img.reserve(c.channels * c.height * c.width);
  for (std::size_t ch = 0; ch < c.channels; ++ch) {
    auto plane = random_pattern(c.height, c.width, rng);
    img.insert(img.end(), plane.begin(), plane.end());
  }
  return img;
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::string content_digest(const Tensor& images, std::span<const int> labels) {
  Sha256 sha;
  for (std::uint64_t d : images.shape()) sha.update(&d, sizeof d);
  sha.update(images.data());
  sha.update(labels);
  return sha.hex();
}

Dataset::Dataset(Tensor images, std::vector<int> labels, std::size_t class_count, Split split)
    : images_(std::move(images)), labels_(std::move(labels)), class_count_(class_count), split_(split) {
  if (images_.rank() < 2 || images_.dim(0) != labels_.size()) {
    throw ShapeError("dataset: images " + mfdv::to_string(images_.shape()) + " vs " + std::to_string(labels_.size()) +
                     " labels");
  }
  for (double v : images_.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericError("dataset: pixel value outside [0,1]");
  }
  for (int y : labels_) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count_) {
      throw FormatError("dataset: label " + std::to_string(y) + " outside [0," + std::to_string(class_count_) + ")");
    }
  }
  id_ = content_digest(images_, labels_);
}

Shape Dataset::example_shape() const { return Shape(images_.shape().begin() + 1, images_.shape().end()); }

Tensor Dataset::example(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("dataset: index out of range");
  const std::size_t stride = images_.size() / size();
  const auto begin = images_.values().begin() + static_cast<std::ptrdiff_t>(index * stride);
  return Tensor(example_shape(), std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(stride)));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape shape = example_shape();
  const std::size_t stride = numel(shape);
  shape.insert(shape.begin(), indices.size());
  Tensor out(std::move(shape));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= size()) throw std::out_of_range("dataset: index out of range");
    std::copy_n(images_.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return out;
}

Dataset read_cifar_file(const std::filesystem::path& file, CifarVariant variant, Split split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cifar: cannot open " + file.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t record = label_bytes(variant) + kCifarPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw FormatError("cifar: " + file.string() + " has " + std::to_string(bytes.size()) +
                      " bytes, expected a non-zero multiple of " + std::to_string(record));
  }
  const std::size_t n = bytes.size() / record;
  Tensor images({n, 3, 32, 32});
  std::vector<int> labels(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * record;
    labels[r] = rec[label_bytes(variant) - 1];
    const unsigned char* px = rec + label_bytes(variant);
    for (std::size_t i = 0; i < kCifarPixels; ++i) images[r * kCifarPixels + i] = px[i] / 255.0;
  }
  return Dataset(std::move(images), std::move(labels), variant == CifarVariant::Cifar10 ? 10 : 100, split);
}

namespace {

Dataset read_exact(const std::filesystem::path& file, CifarVariant variant, Split split, std::size_t records) {
  const std::size_t expected = records * (label_bytes(variant) + kCifarPixels);
  std::error_code ec;
  const auto actual = std::filesystem::file_size(file, ec);
  if (ec) throw FormatError("cifar: cannot stat " + file.string() + ": " + ec.message());
  if (actual != expected) {
    throw FormatError("cifar: " + file.string() + " has " + std::to_string(actual) + " bytes, expected " +
                      std::to_string(expected));
  }
  return read_cifar_file(file, variant, split);
}

Dataset concat(const std::vector<Dataset>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape shape = parts.front().images().shape();
  shape[0] = n;
  std::vector<double> pixels;
  std::vector<int> labels;
  pixels.reserve(numel(shape));
  labels.reserve(n);
  for (const auto& p : parts) {
    pixels.insert(pixels.end(), p.images().values().begin(), p.images().values().end());
    labels.insert(labels.end(), p.labels().begin(), p.labels().end());
  }
  return Dataset(Tensor(std::move(shape), std::move(pixels)), std::move(labels), parts.front().class_count(),
                 parts.front().split());
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir) {
  std::vector<Dataset> train;
  for (int i = 1; i <= 5; ++i) {
    train.push_back(read_exact(dir / ("data_batch_" + std::to_string(i) + ".bin"), CifarVariant::Cifar10, Split::Train,
                               kCifarRecordsPerFile));
  }
  Dataset test = read_exact(dir / "test_batch.bin", CifarVariant::Cifar10, Split::Test, kCifarRecordsPerFile);
  return {concat(train), std::move(test)};
}

std::pair<Dataset, Dataset> load_cifar100(const std::filesystem::path& dir) {
  return {read_exact(dir / "train.bin", CifarVariant::Cifar100, Split::Train, 5 * kCifarRecordsPerFile),
          read_exact(dir / "test.bin", CifarVariant::Cifar100, Split::Test, kCifarRecordsPerFile)};
}

Dataset synth_blobs(std::size_t classes, std::size_t n_per_class, std::size_t dim, std::uint64_t seed,
                    double separation, Split split) {
  if (classes < 2) throw ConfigError("data.classes", "synth_blobs needs at least 2 classes");
  if (dim == 0 || n_per_class == 0) throw ConfigError("data.size", "synth_blobs needs dim > 0 and n_per_class > 0");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Two classes sit at +-separation/2 along one direction; more classes use random
  // directions scaled so that expected pairwise distance is `separation`.
  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  std::vector<double> axis(dim);
  for (double& a : axis) a = normal(rng);
  double norm = 0.0;
  for (double a : axis) norm += a * a;
  norm = std::sqrt(norm);
  for (std::size_t c = 0; c < classes; ++c) {
    if (classes == 2) {
      const double side = c == 0 ? -0.5 : 0.5;
      for (std::size_t d = 0; d < dim; ++d) means[c][d] = side * separation * axis[d] / norm;
    } else {
      for (std::size_t d = 0; d < dim; ++d) means[c][d] = separation / std::sqrt(2.0 * static_cast<double>(dim)) * normal(rng);
    }
  }

  // Affine map into [0,1] that leaves ~4 noise-sigmas of headroom; the clamp only
  // touches extreme tail draws.
  const double half_range = separation / 2.0 + 4.0;
  const std::size_t n = classes * n_per_class;
  Tensor x({n, dim});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    labels[i] = static_cast<int>(c);
    for (std::size_t d = 0; d < dim; ++d) {
      x[i * dim + d] = std::clamp(0.5 + (means[c][d] + normal(rng)) / (2.0 * half_range), 0.0, 1.0);
    }
  }
  return Dataset(std::move(x), std::move(labels), classes, split);
}

Dataset synth_images(const SynthImageConfig& c) {
  if (c.classes < 2) throw ConfigError("data.classes", "synth_images needs at least 2 classes");
  Rng template_rng(derive_seed(c.template_seed, 0, 0x7e3a));
  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < c.classes; ++k) templates.push_back(random_image_pattern(c, template_rng));
  constexpr std::size_t kNuisance = 8;
  std::vector<std::vector<double>> nuisance;
  for (std::size_t k = 0; k < kNuisance; ++k) nuisance.push_back(random_image_pattern(c, template_rng));

  Rng rng(derive_seed(c.sample_seed, c.split == Split::Train ? 1 : 2, 0x5a3b));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t stride = c.channels * c.height * c.width;
  const std::size_t n = c.classes * c.n_per_class;
  Tensor images({n, c.channels, c.height, c.width});
  std::vector<int> labels(n);
  std::vector<double> coeff(kNuisance);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % c.classes;
    labels[i] = static_cast<int>(k);
    for (double& a : coeff) a = normal(rng) / std::sqrt(static_cast<double>(kNuisance));
    const double strength = 1.0 + 0.25 * normal(rng);
    for (std::size_t p = 0; p < stride; ++p) {
      double v = 0.5 + c.template_amplitude * strength * templates[k][p];
      for (std::size_t m = 0; m < kNuisance; ++m) v += c.nuisance_amplitude * coeff[m] * nuisance[m][p];
      v += c.pixel_noise * normal(rng);
      images[i * stride + p] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Dataset(std::move(images), std::move(labels), c.classes, c.split);
}

Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  if (n > dataset.size()) {
    throw std::invalid_argument("subset: requested " + std::to_string(n) + " examples from a dataset of " +
                                std::to_string(dataset.size()));
  }
  std::vector<std::vector<std::size_t>> pools(dataset.class_count());
  for (std::size_t i = 0; i < dataset.size(); ++i) pools[static_cast<std::size_t>(dataset.label(i))].push_back(i);
  Rng rng(seed);
  for (auto& pool : pools) std::shuffle(pool.begin(), pool.end(), rng);

  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  for (std::size_t round = 0; chosen.size() < n; ++round) {
    for (const auto& pool : pools) {
      if (chosen.size() == n) break;
      if (round < pool.size()) chosen.push_back(pool[round]);
    }
  }
  std::sort(chosen.begin(), chosen.end());

  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t i : chosen) labels.push_back(dataset.label(i));
  return Dataset(dataset.batch(chosen), std::move(labels), dataset.class_count(), dataset.split());
}

}  // namespace mfdv::data
