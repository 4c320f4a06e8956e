#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mfdv/data.hpp"
#include "mfdv/errors.hpp"
#include "mfdv/inference.hpp"
#include "mfdv/train.hpp"

namespace mfdv::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mfdv_data_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_records(const fs::path& file, const std::vector<std::vector<unsigned char>>& records) {
  std::ofstream out(file, std::ios::binary);
  for (const auto& r : records) out.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size()));
}

std::vector<unsigned char> record(std::vector<unsigned char> labels, unsigned char fill) {
  std::vector<unsigned char> r = std::move(labels);
  r.resize(r.size() + 3072, fill);
  return r;
}

TEST(Cifar, FirstRecordLabel) {
  const fs::path f = scratch("label") / "batch.bin";
  auto r0 = record({7}, 0);
  r0[1] = 255;       // channel 0, pixel (0,0)
  r0[1 + 1024] = 51;  // channel 1, pixel (0,0)
  write_records(f, {r0, record({2}, 10)});
  const Dataset d = read_cifar_file(f, CifarVariant::Cifar10, Split::Train);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.label(0), 7);
  EXPECT_EQ(d.label(1), 2);
  EXPECT_EQ(d.example_shape(), (Shape{3, 32, 32}));
  const Tensor x = d.example(0);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1024], 51.0 / 255.0);
  EXPECT_EQ(x[1], 0.0);
}

TEST(Cifar, AllMaxPixelsScaleToOne) {
  const fs::path f = scratch("white") / "batch.bin";
  write_records(f, {record({3}, 255), record({4}, 255)});
  const Dataset d = read_cifar_file(f, CifarVariant::Cifar10, Split::Test);
  for (double v : d.images().data()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(d.split(), Split::Test);
}

TEST(Cifar, Cifar100UsesFineLabel) {
  const fs::path f = scratch("c100") / "train.bin";
  write_records(f, {record({4, 93}, 0)});
  const Dataset d = read_cifar_file(f, CifarVariant::Cifar100, Split::Train);
  EXPECT_EQ(d.label(0), 93);
  EXPECT_EQ(d.class_count(), 100u);
}

TEST(Cifar, RaggedFileReportsByteCounts) {
  const fs::path f = scratch("ragged") / "batch.bin";
  auto r = record({1}, 0);
  r.pop_back();
  write_records(f, {r});
  try {
    read_cifar_file(f, CifarVariant::Cifar10, Split::Train);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3072"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3073"), std::string::npos) << msg;
  }
}

TEST(Cifar, LabelOutOfRangeIsRejected) {
  const fs::path f = scratch("badlabel") / "batch.bin";
  write_records(f, {record({10}, 0)});
  EXPECT_THROW(read_cifar_file(f, CifarVariant::Cifar10, Split::Train), FormatError);
}

TEST(Cifar, DirectoryWithWrongSizedBatchNamesExpectedAndActual) {
  const fs::path dir = scratch("dir");
  write_records(dir / "data_batch_1.bin", {record({1}, 0)});
  try {
    load_cifar10(dir);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("30730000"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3073"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_cifar10(scratch("empty")), FormatError);
}

TEST(Dataset, RejectsOutOfRangePixels) {
  EXPECT_THROW(Dataset(Tensor({1, 2}, {0.5, 1.5}), {0}, 2, Split::Train), NumericError);
  EXPECT_THROW(Dataset(Tensor({2, 2}), {0}, 2, Split::Train), ShapeError);
  EXPECT_THROW(Dataset(Tensor({1, 2}), {2}, 2, Split::Train), FormatError);
}

TEST(Blobs, DeterministicAndBalanced) {
  const Dataset a = synth_blobs(3, 40, 5, 11);
  const Dataset b = synth_blobs(3, 40, 5, 11);
  EXPECT_EQ(a.id(), b.id());
  EXPECT_NE(a.id(), synth_blobs(3, 40, 5, 12).id());
  std::map<int, int> counts;
  for (int y : a.labels()) ++counts[y];
  for (int c = 0; c < 3; ++c) EXPECT_EQ(counts[c], 40);
  for (double v : a.images().data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Blobs, TwoClassesAtSixSigmaAreLinearlySeparable) {
  const Dataset blobs = synth_blobs(2, 200, 10, 4, 6.0);
  Rng init(0);
  nn::Model probe(nn::linear_classifier(10, 2), init);
  nn::TrainConfig cfg;
  cfg.epochs = 200;
  cfg.loss = {0.0, 0.0};
  nn::train(probe, blobs, nullptr, cfg);
  EXPECT_GE(eval::clean_accuracy(probe, blobs, {}), 0.99);
}

TEST(Blobs, NeedsTwoClasses) { EXPECT_THROW(synth_blobs(1, 10, 3, 0), ConfigError); }

TEST(SynthImages, ShapeRangeAndDeterminism) {
  SynthImageConfig c;
  c.n_per_class = 3;
  const Dataset a = synth_images(c);
  EXPECT_EQ(a.images().shape(), (Shape{30, 3, 32, 32}));
  EXPECT_EQ(a.id(), synth_images(c).id());
  c.sample_seed = 2;
  EXPECT_NE(a.id(), synth_images(c).id());
}

TEST(Subset, FullSizeIsAPermutationOfContent) {
  const Dataset d = synth_blobs(3, 5, 2, 1);
  const Dataset s = subset(d, d.size(), 9);
  auto rows = [](const Dataset& x) {
    std::multiset<std::vector<double>> out;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto v = x.example(i).values();
      v.push_back(x.label(i));
      out.insert(v);
    }
    return out;
  };
  EXPECT_EQ(rows(d), rows(s));
}

TEST(Subset, OnePerClassWhenNEqualsClassCount) {
  const Dataset d = synth_blobs(10, 8, 3, 1);
  const Dataset s = subset(d, 10, 3);
  std::set<int> seen(s.labels().begin(), s.labels().end());
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Subset, SeededAndBounded) {
  const Dataset d = synth_blobs(4, 20, 3, 1);
  EXPECT_EQ(subset(d, 30, 5).id(), subset(d, 30, 5).id());
  EXPECT_NE(subset(d, 30, 5).id(), subset(d, 30, 6).id());
  EXPECT_THROW(subset(d, 81, 0), std::invalid_argument);
}

}  // namespace
}  // namespace mfdv::data
