#include "fedcog/gradcheck.hpp"

#include <set>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace fedcog::nn {
namespace {

using fedcog::testing::gaussian;
using fedcog::testing::random_probs;

TEST(GradCheckTest, SuiteCoversEveryComposition) {
  const auto lines = run_gradcheck_suite(4, 11);
  std::set<std::string> names;
  for (const auto& line : lines) {
    names.insert(line.composition);
    EXPECT_TRUE(line.report.passed()) << line.composition << " max_rel=" << line.report.max_rel_error;
    EXPECT_GT(line.report.checked, 0u) << line.composition;
  }
  for (const char* required : {"cross_entropy", "kl_to_teacher", "js_disagreement", "l2_to_reference"}) {
    EXPECT_TRUE(names.count(required)) << required;
  }
  EXPECT_GE(names.size(), 8u);
}

TEST(GradCheckTest, DeepNetworkFullObjectiveBothWrt) {
  const std::vector<std::size_t> widths{7, 9, 6, 4};
  const ModelParams m = make_mlp(widths, 21);
  const ModelParams other = make_mlp(widths, 22);
  const ModelParams ref = make_mlp(widths, 23);
  const Tensor x = gaussian(5, 7, 24);
  const std::vector<int> y{0, 3, 1, 2, 3};
  const Tensor teacher = random_probs(5, 4, 25);
  LossSpec spec;
  spec.cross_entropy(y, 0.7).kl_to_teacher(teacher, 0.3).js_disagreement(other, 0.2).l2_to_reference(ref, 0.05);
  const GradCheckReport r = check_gradients(m, x, spec, Wrt::Both);
  EXPECT_TRUE(r.passed()) << "max_rel=" << r.max_rel_error;
  EXPECT_EQ(r.checked, m.parameter_count() + x.size());
}

TEST(GradCheckTest, GenerationObjectiveInputGradients) {
  const std::vector<std::size_t> widths{12, 8, 5};
  const ModelParams global = make_mlp(widths, 31);
  const ModelParams local = make_mlp(widths, 32);
  const Tensor x = gaussian(6, 12, 33);
  const std::vector<int> y{0, 1, 2, 3, 4, 0};
  LossSpec spec;
  spec.cross_entropy(y).js_disagreement(local, 0.1);
  const GradCheckReport r = check_gradients(global, x, spec, Wrt::Inputs);
  EXPECT_TRUE(r.passed()) << "max_rel=" << r.max_rel_error;
  EXPECT_EQ(r.checked, x.size());
}

TEST(GradCheckTest, ReportMergeAccumulates) {
  GradCheckReport a{10, 1, 0.5, 1e-3};
  const GradCheckReport b{5, 0, 0.7, 1e-4};
  a.merge(b);
  EXPECT_EQ(a.checked, 15u);
  EXPECT_EQ(a.failures, 1u);
  EXPECT_DOUBLE_EQ(a.max_rel_error, 0.7);
  EXPECT_DOUBLE_EQ(a.max_abs_error, 1e-3);
}

}  // namespace
}  // namespace fedcog::nn
