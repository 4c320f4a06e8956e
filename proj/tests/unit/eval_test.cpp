#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mfdv/autodiff.hpp"
#include "mfdv/errors.hpp"
#include "mfdv/eval.hpp"
#include "mfdv/report.hpp"
#include "mfdv/train.hpp"

namespace mfdv::eval {
namespace {

namespace fs = std::filesystem;

data::Dataset small_images(std::size_t per_class, std::uint64_t sample_seed) {
  data::SynthImageConfig c;
  c.classes = 4;
  c.n_per_class = per_class;
  c.height = 8;
  c.width = 8;
  c.template_amplitude = 0.3;  // 8x8 has few pixels to average over
  c.sample_seed = sample_seed;
  return data::synth_images(c);
}

// Trained once and shared: a stochastic 8x8 CNN that is right most of the time.
const nn::Model& trained_model() {
  static const nn::Model model = [] {
    Rng init(0);
    nn::Model m(nn::mini_cnn(3, 8, 8, 16, 4, true, 4, 8), init);
    nn::TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 20;
    cfg.lr = 0.05;
    cfg.loss.lambda1 = 0.05;
    nn::train(m, small_images(40, 1), nullptr, cfg);
    return m;
  }();
  return model;
}

const data::Dataset& test_images() {
  static const data::Dataset d = small_images(10, 2);
  return d;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mfdv_eval_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(RobustAccuracy, NullAttackReproducesCleanAccuracy) {
  const EvalOptions opt{15, 7, 1};
  const double clean = clean_accuracy(trained_model(), test_images(), opt);
  EXPECT_GT(clean, 0.5);
  const RobustResult r = robust_accuracy(trained_model(), test_images(), attacks::NullAttack{}, opt);
  EXPECT_EQ(r.accuracy, clean);
  EXPECT_FALSE(r.partial);
  EXPECT_EQ(r.completed, test_images().size());
}

TEST(RobustAccuracy, ZeroEpsilonFgsmReproducesCleanAccuracy) {
  const EvalOptions opt{15, 8, 1};
  EXPECT_EQ(robust_accuracy(trained_model(), test_images(), attacks::Fgsm{0.0}, opt).accuracy,
            clean_accuracy(trained_model(), test_images(), opt));
}

TEST(RobustAccuracy, CleanMissesCountAsSuccesses) {
  const EvalOptions opt{15, 9, 1};
  const RobustResult r = robust_accuracy(trained_model(), test_images(), attacks::Pgd{}, opt);
  for (const auto& e : r.examples) {
    if (!e.clean_correct) {
      EXPECT_FALSE(e.attacked);
      EXPECT_FALSE(e.robust_correct);
    }
  }
  EXPECT_LE(r.accuracy, clean_accuracy(trained_model(), test_images(), opt));
}

TEST(RobustAccuracy, ThreadCountDoesNotChangeResults) {
  const attacks::AttackConfig atk = attacks::Pgd{8.0 / 255.0, 0.8 / 255.0, 3, true};
  const RobustResult one = robust_accuracy(trained_model(), test_images(), atk, {15, 3, 1});
  const RobustResult four = robust_accuracy(trained_model(), test_images(), atk, {15, 3, 4});
  EXPECT_EQ(one.accuracy, four.accuracy);
  ASSERT_EQ(one.examples.size(), four.examples.size());
  for (std::size_t i = 0; i < one.examples.size(); ++i) {
    EXPECT_EQ(one.examples[i].robust_correct, four.examples[i].robust_correct) << i;
    EXPECT_EQ(one.examples[i].distortion.l2, four.examples[i].distortion.l2) << i;
  }
  EXPECT_EQ(summarize(atk, one), summarize(atk, four));
}

TEST(RobustAccuracy, FailingAttackYieldsFlaggedPartialResult) {
  // Overflowing weights under finite-value checks make every forward throw.
  const data::Dataset blobs = data::synth_blobs(2, 5, 4, 0);
  Rng init(0);
  nn::Model m(nn::mlp(4, 8, 4, 2, false), init);
  m.set_parameter("layer0.weight", Tensor::full({4, 8}, 1e308));
  set_finite_checks(true);
  const RobustResult r = robust_accuracy(m, blobs, attacks::Fgsm{}, {});
  set_finite_checks(false);
  EXPECT_TRUE(r.partial);
  EXPECT_NE(r.error.find("example 0"), std::string::npos) << r.error;
  EXPECT_LT(r.completed, blobs.size());
  EXPECT_TRUE(summarize(attacks::Fgsm{}, r).partial);
}

TEST(RobustAccuracy, InvalidAttackFailsBeforeAnyExample) {
  const data::Dataset blobs = data::synth_blobs(2, 5, 4, 0);
  Rng init(0);
  const nn::Model m(nn::mlp(4, 8, 4, 2, false), init);
  EXPECT_THROW(robust_accuracy(m, blobs, attacks::Pgd{0.1, -1.0, 2, false}, {}), ConfigError);
}

TEST(RobustAccuracy, AccuracyFallsWithEpsilon) {
  const EvalOptions opt{15, 4, 1};
  double previous = 1.0;
  for (double eps : {0.0, 2.0 / 255, 8.0 / 255, 32.0 / 255}) {
    const double acc = robust_accuracy(trained_model(), test_images(), attacks::Pgd{eps, std::max(eps / 10.0, 1e-4), 10, false}, opt).accuracy;
    EXPECT_LE(acc, previous + 0.01) << eps;  // one point of slack for MC noise
    previous = acc;
  }
}

TEST(PgdSweep, LossIsNonDecreasingInEpsilon) {
  Rng init(1);
  const nn::Model m(nn::mini_cnn(3, 8, 8, 16, 4, false, 4, 8), init);
  const std::vector<double> eps{1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255};
  for (std::size_t i = 0; i < 20; ++i) {
    const Tensor x = test_images().example(i);
    const int y = test_images().label(i);
    Rng rng(i);
    const std::vector<Tensor> adv = attacks::pgd_sweep(m, x, y, eps, attacks::Pgd{1.0 / 255, 0.1 / 255, 5, false}, rng);
    ASSERT_EQ(adv.size(), eps.size());
    double previous = -1.0;
    for (std::size_t k = 0; k < adv.size(); ++k) {
      EXPECT_LE(attacks::distortion(x, adv[k]).linf, eps[k] + 1e-12);
      const double loss = nn::loss_value(m, adv[k], y, nn::LossKind::CrossEntropy, rng);
      EXPECT_GE(loss, previous) << "example " << i << " eps " << eps[k] * 255;
      previous = loss;
    }
  }
  Rng rng(0);
  EXPECT_THROW(attacks::pgd_sweep(m, test_images().example(0), 0, {0.1, 0.05}, {}, rng), std::invalid_argument);
}

TEST(Checklist, EmptyBudgetIsRejected) {
  ChecklistOptions c;
  c.budget = 0;
  try {
    obfuscation_checklist(trained_model(), test_images(), c, {});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "empty evaluation budget");
  }
}

TEST(Checklist, ProducesEveryVerdictWithConsistentEvidence) {
  ChecklistOptions c;
  c.budget = 16;
  c.sweep = {2.0 / 255, 8.0 / 255, 128.0 / 255};
  c.square_budget = 100;
  c.noise_samples = 10;
  c.eot_samples = 4;
  const ChecklistResult r = obfuscation_checklist(trained_model(), test_images(), c, {15, 0, 1});
  for (const char* id : {"C1", "C2", "C3", "C4", "C5", "EOT"}) ASSERT_TRUE(r.verdicts.count(id)) << id;
  const auto& c1 = r.verdicts.at("C1");
  EXPECT_EQ(c1.pass, c1.evidence.at("fgsm_accuracy") >= c1.evidence.at("pgd_accuracy"));
  EXPECT_EQ(r.verdicts.at("C3").evidence.at("epsilon"), 128.0 / 255);
  // fgsm, pgd@eps, two extra sweep points, square, noise, eot
  EXPECT_EQ(r.rows.size(), 7u);
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.examples, 16u);
    EXPECT_GE(row.accuracy, 0.0);
    EXPECT_LE(row.accuracy, 1.0);
  }
}

EvalReport sample_report() {
  EvalReport r;
  r.model_id = "abc";
  r.dataset_id = "def";
  r.clean_accuracy = 0.875;
  r.seed = 12;
  r.rows.push_back({"fgsm:eps=0.031372549019607843", 8.0 / 255, 0.5, 1.0, {100.0, 0.4, 8.0 / 255}, 16, false});
  r.rows.push_back({"pgd:alpha=0.0031372549019607843,eps=0.031372549019607843,k=10,random_start=0", 8.0 / 255, 0.1 / 3.0,
                    10.0, {120.0, 0.5, 8.0 / 255}, 16, false});
  r.checklist["C1"] = {true, {{"fgsm_accuracy", 0.5}, {"pgd_accuracy", 0.1 / 3.0}}};
  r.metadata["data_source"] = "test";
  return r;
}

TEST(Report, JsonRoundTripIsIdentity) {
  const EvalReport r = sample_report();
  EXPECT_EQ(from_json(to_json(r)), r);
  EXPECT_EQ(to_json(from_json(to_json(r))), to_json(r));
}

TEST(Report, RejectsOutOfRangeAccuracy) {
  EvalReport r = sample_report();
  r.rows[0].accuracy = 1.5;
  EXPECT_THROW(from_json(to_json(r)), FormatError);
  EXPECT_THROW(from_json("{not json"), FormatError);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Report, WritesAreByteIdenticalAndNeverOverwrite) {
  const fs::path dir = scratch("write");
  const EvalReport r = sample_report();
  write_report(r, dir / "a.json");
  write_report(r, dir / "b.json");
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_THROW(write_report(r, dir / "a.json"), std::runtime_error);
  EXPECT_NO_THROW(write_report(r, dir / "a.json", true));
  EXPECT_EQ(read_report(dir / "a.json"), r);
}

TEST(Report, CsvHasHeaderPlusOneLinePerRow) {
  const std::string csv = to_csv(sample_report());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "attack,epsilon,accuracy,mean_queries,linf,l2,l0");
}

TEST(Report, DiffOfIdenticalReportsIsAllZero) {
  const EvalReport r = sample_report();
  const std::string table = diff(r, r);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);  // header, clean, two rows
  EXPECT_NE(table.find("+0.0000"), std::string::npos);
  EXPECT_EQ(table.find("-0.0"), std::string::npos);
}

TEST(Report, DiffReportsDeltaAndGridMismatch) {
  const EvalReport a = sample_report();
  EvalReport b = a;
  b.rows[1].accuracy = 0.25;
  EXPECT_NE(diff(a, b).find("+0.2167"), std::string::npos) << diff(a, b);
  b.rows.pop_back();
  try {
    diff(a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("only in first: pgd:"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace mfdv::eval
