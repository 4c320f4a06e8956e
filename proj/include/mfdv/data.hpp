#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfdv/tensor.hpp"

namespace mfdv::data {

enum class Split { Train, Test };

std::string_view to_string(Split split);

/// Immutable labelled dataset. images is [N, ...] with every value in [0,1];
/// labels are in [0, class_count). id is a content digest.
class Dataset {
 public:
  Dataset(Tensor images, std::vector<int> labels, std::size_t class_count, Split split);

  const Tensor& images() const noexcept { return images_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  std::size_t class_count() const noexcept { return class_count_; }
  Split split() const noexcept { return split_; }
  const std::string& id() const noexcept { return id_; }

  std::size_t size() const noexcept { return labels_.size(); }
  /// Shape of a single example (images' shape without the leading N).
  Shape example_shape() const;
  Tensor example(std::size_t index) const;
  int label(std::size_t index) const { return labels_.at(index); }
  /// Stacks the selected examples into [B, ...].
  Tensor batch(std::span<const std::size_t> indices) const;

 private:
  Tensor images_;
  std::vector<int> labels_;
  std::size_t class_count_;
  Split split_;
  std::string id_;
};

/// Hex SHA-256 over shape, pixel payload and labels.
std::string content_digest(const Tensor& images, std::span<const int> labels);

enum class CifarVariant { Cifar10, Cifar100 };

/// Reads one CIFAR binary file: records of label byte(s) + 3072 CHW pixel bytes.
/// CIFAR-100 records carry (coarse, fine); the fine label is used.
Dataset read_cifar_file(const std::filesystem::path& file, CifarVariant variant, Split split);

/// Standard CIFAR-10 binary distribution: data_batch_{1..5}.bin + test_batch.bin,
/// 10000 records each. Throws FormatError naming expected/actual byte counts.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir);

/// CIFAR-100 binary distribution: train.bin (50000) + test.bin (10000).
std::pair<Dataset, Dataset> load_cifar100(const std::filesystem::path& dir);

/// Gaussian blobs mapped into [0,1]^dim; returns [classes * n_per_class, dim] vectors.
/// Class means sit `separation` noise-sigmas apart.
Dataset synth_blobs(std::size_t classes, std::size_t n_per_class, std::size_t dim, std::uint64_t seed,
                    double separation = 6.0, Split split = Split::Train);

struct SynthImageConfig {
  std::size_t classes = 10;
  std::size_t n_per_class = 100;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double template_amplitude = 0.12;
  double nuisance_amplitude = 0.15;
  double pixel_noise = 0.08;
  std::uint64_t template_seed = 0;  // fixes the classes; share it between train and test
  std::uint64_t sample_seed = 1;    // fixes the individual draws
  Split split = Split::Train;
};

/// CIFAR-shaped synthetic images: per-class low-frequency templates plus shared
/// nuisance patterns and pixel noise, clamped to [0,1].
Dataset synth_images(const SynthImageConfig& config);

/// Deterministic class-stratified sample of n examples (round-robin over
/// shuffled per-class pools), returned in original index order.
Dataset subset(const Dataset& dataset, std::size_t n, std::uint64_t seed);

}  // namespace mfdv::data
