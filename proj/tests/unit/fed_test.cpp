#include "fedcog/fed.hpp"

#include <cmath>
#include <set>
#include <vector>

#include "fedcog/error.hpp"
#include "gtest/gtest.h"
#include "test_util.hpp"

namespace fedcog::fed {
namespace {

using fedcog::testing::mlp;
using fedcog::testing::small_dataset;

nn::ModelParams flat(std::vector<double> w) {
  nn::ModelParams m;
  const std::size_t n = w.size();
  m.layers.push_back({Tensor::matrix(1, n, std::move(w)), Tensor::vector({0.0})});
  return m;
}

ClientUpdate update(int id, nn::ModelParams p, std::int64_t n) {
  ClientUpdate u;
  u.client_id = id;
  u.params = std::move(p);
  u.num_samples = n;
  return u;
}

// ---------------------------------------------------------------------------
// Aggregation.

TEST(AggregateTest, EqualWeights) {
  const std::vector<ClientUpdate> ups{update(0, flat({1, 2}), 100), update(1, flat({3, 4}), 100)};
  EXPECT_EQ(aggregate(ups), flat({2, 3}));
}

TEST(AggregateTest, SizeWeighted) {
  const std::vector<ClientUpdate> ups{update(0, flat({0, 0}), 100), update(1, flat({4, 8}), 300)};
  EXPECT_EQ(aggregation_weights(ups), (std::vector<double>{0.25, 0.75}));
  EXPECT_EQ(aggregate(ups), flat({3, 6}));
}

TEST(AggregateTest, SingleUpdateAndIdenticalCopiesAreExact) {
  const auto m = mlp({7, 5, 3}, 1);
  const std::vector<ClientUpdate> one{update(3, m, 17)};
  EXPECT_EQ(aggregate(one), m);
  std::vector<ClientUpdate> many;
  for (int k = 0; k < 7; ++k) many.push_back(update(k, m, 10 + 3 * k));
  EXPECT_EQ(aggregate(many), m);
}

TEST(AggregateTest, ErrorsOnEmptyOrMismatched) {
  EXPECT_THROW(aggregate({}), ProtocolError);
  const std::vector<ClientUpdate> bad{update(0, flat({1, 2}), 1), update(1, flat({1, 2, 3}), 1)};
  EXPECT_THROW(aggregate(bad), ShapeError);
  const std::vector<ClientUpdate> empty_client{update(0, flat({1}), 0)};
  EXPECT_THROW(aggregate(empty_client), ProtocolError);
}

TEST(MomentumTest, ZeroMomentumIsPlainAggregate) {
  GlobalState state;
  state.global_model = flat({1, 1});
  const std::vector<ClientUpdate> ups{update(0, flat({0, 2}), 1), update(1, flat({2, 6}), 3)};
  EXPECT_EQ(aggregate_with_momentum(state, ups, 0.0), aggregate(ups));
}

TEST(MomentumTest, RepeatedPseudoGradientGrowsByMomentum) {
  // theta - avg = g = [1, -2] in both rounds: steps are g, then (1 + 0.1) g.
  GlobalState state;
  state.global_model = flat({10, 10});
  const auto first = apply_server_momentum(state, flat({9, 12}), 0.1);
  EXPECT_EQ(first, flat({9, 12}));
  state.global_model = first;
  const auto second = apply_server_momentum(state, flat({8, 14}), 0.1);
  EXPECT_NEAR(second.layers[0].weight[0], 9 - 1.1, 1e-15);
  EXPECT_NEAR(second.layers[0].weight[1], 12 + 2.2, 1e-15);
}

TEST(MomentumTest, RangeChecked) {
  GlobalState state;
  state.global_model = flat({0});
  EXPECT_THROW(apply_server_momentum(state, flat({0}), 1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Client sampling.

TEST(SamplingTest, FullParticipation) {
  EXPECT_EQ(sample_clients(5, 5, 3, 1), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(participation_count(10, 1.0), 10);
  EXPECT_EQ(participation_count(200, 0.05), 10);
  EXPECT_EQ(participation_count(3, 0.01), 1);
}

TEST(SamplingTest, DistinctSortedDeterministic) {
  const auto a = sample_clients(200, 10, 4, 7);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 10u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  for (int id : a) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 200);
  }
  EXPECT_EQ(a, sample_clients(200, 10, 4, 7));
  EXPECT_NE(a, sample_clients(200, 10, 5, 7));
}

TEST(SamplingTest, InvalidCounts) {
  EXPECT_THROW(sample_clients(5, 6, 0, 0), ConfigError);
  EXPECT_THROW(sample_clients(5, 0, 0, 0), ConfigError);
  EXPECT_THROW(participation_count(5, 0.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Rounds.

struct Federation {
  std::vector<ClientSlot> clients;
  data::LabeledDataset test;
  GlobalState state;
};

Federation make_federation(int k, std::uint64_t seed, data::PartitionSpec spec = {data::Iid{}, 1, 0}) {
  Federation f;
  const auto train = small_dataset(4, 30, 8, seed, 0.4);
  f.test = small_dataset(4, 10, 8, seed + 1, 0.4);
  spec.num_clients = k;
  spec.seed = seed;
  const auto parts = data::partition(train, spec);
  for (int i = 0; i < k; ++i) {
    ClientSlot slot;
    slot.id = i;
    slot.train = parts[static_cast<std::size_t>(i)];
    f.clients.push_back(std::move(slot));
  }
  f.state.global_model = mlp({8, 10, 6, 4}, seed);
  return f;
}

RoundConfig base_config(train::TrainerKind method) {
  RoundConfig c;
  c.method = method;
  c.local.tau = 6;
  c.local.lr = 0.1;
  c.local.batch_size = 8;
  c.gen.num_samples = 16;
  c.gen.steps = 3;
  c.seed = 11;
  return c;
}

// Runs `rounds` rounds and returns the final state plus the last record.
RoundOutcome run(Federation f, const RoundConfig& cfg, int rounds) {
  RoundOutcome out{f.state, {}};
  for (int t = 0; t < rounds; ++t) out = run_round(out.state, f.clients, cfg, f.test);
  return out;
}

TEST(RoundTest, SingleClientGlobalEqualsLocal) {
  Federation f = make_federation(1, 3);
  const auto cfg = base_config(train::FedAvg{});
  const auto out = run_round(f.state, f.clients, cfg, f.test);
  EXPECT_EQ(out.state.global_model, *f.clients[0].last_local);
  EXPECT_EQ(out.state.round, 1);
  EXPECT_EQ(out.record.model_diff_l2, std::vector<double>{0.0});
}

TEST(RoundTest, ZeroLocalStepsKeepGlobal) {
  Federation f = make_federation(3, 3);
  auto cfg = base_config(train::FedAvg{});
  cfg.local.tau = 0;
  EXPECT_EQ(run_round(f.state, f.clients, cfg, f.test).state.global_model, f.state.global_model);
}

TEST(RoundTest, RecordListsMatchParticipants) {
  Federation f = make_federation(5, 4);
  auto cfg = base_config(train::FedAvg{});
  cfg.participants = 3;
  const auto out = run_round(f.state, f.clients, cfg, f.test);
  const auto& r = out.record;
  EXPECT_EQ(r.client_ids, sample_clients(5, 3, 0, cfg.seed));
  for (const auto* list : {&r.per_client_general_acc, &r.per_client_personal_acc, &r.model_diff_l2,
                           &r.mean_train_loss, &r.gen_seconds, &r.train_seconds}) {
    EXPECT_EQ(list->size(), 3u);
  }
  EXPECT_GE(r.global_acc, 0.0);
  EXPECT_LE(r.global_acc, 1.0);
}

TEST(RoundTest, ReductionsAreBitwiseFedAvg) {
  const Federation f = make_federation(4, 5, {data::Niid2{2}, 4, 0});
  const auto fedavg = run(f, base_config(train::FedAvg{}), 3);

  const auto prox = run(f, base_config(train::FedProx{0.0}), 3);
  EXPECT_EQ(prox.state.global_model, fedavg.state.global_model);
  EXPECT_EQ(prox.record.model_diff_l2, fedavg.record.model_diff_l2);

  auto cog = base_config(train::FedCog{0.0, false});
  cog.gen.steps = 0;
  const auto cog_run = run(f, cog, 3);
  EXPECT_EQ(cog_run.state.global_model, fedavg.state.global_model);
  EXPECT_EQ(cog_run.record.per_client_general_acc, fedavg.record.per_client_general_acc);

  auto avg1 = base_config(train::FedAvg{});
  auto scaffold1 = base_config(train::Scaffold{});
  avg1.local.tau = scaffold1.local.tau = 1;
  EXPECT_EQ(run(f, scaffold1, 1).state.global_model, run(f, avg1, 1).state.global_model);
}

TEST(RoundTest, WarmStartRoundsMatchFedAvg) {
  const Federation f = make_federation(3, 6, {data::Niid2{2}, 3, 0});
  auto cog = base_config(train::FedCog{});
  cog.generation_active = false;
  EXPECT_EQ(run(f, cog, 2).state.global_model, run(f, base_config(train::FedAvg{}), 2).state.global_model);
}

TEST(RoundTest, ThreadCountDoesNotChangeResults) {
  const Federation f = make_federation(4, 7, {data::Niid1{0.5}, 4, 0});
  auto one = base_config(train::FedCog{});
  auto many = one;
  many.threads = 4;
  const auto a = run(f, one, 2);
  const auto b = run(f, many, 2);
  EXPECT_EQ(a.state.global_model, b.state.global_model);
  EXPECT_EQ(a.record.per_client_general_acc, b.record.per_client_general_acc);
}

TEST(RoundTest, ScaffoldMaintainsControlVariates) {
  Federation f = make_federation(3, 8);
  const auto cfg = base_config(train::Scaffold{});
  const auto out = run_round(f.state, f.clients, cfg, f.test);
  ASSERT_TRUE(out.state.scaffold_c.has_value());
  nn::ModelParams expected = nn::zeros_like(f.state.global_model);
  for (const auto& slot : f.clients) {
    ASSERT_TRUE(slot.control.has_value());
    nn::axpy(1.0 / 3.0, *slot.control, expected);
  }
  EXPECT_LT(std::sqrt(nn::squared_norm(nn::difference(*out.state.scaffold_c, expected))), 1e-12);
}

TEST(RoundTest, FedAvgMKeepsVelocity) {
  Federation f = make_federation(2, 9);
  auto cfg = base_config(train::FedAvg{});
  cfg.server_momentum = 0.1;
  const auto out = run_round(f.state, f.clients, cfg, f.test);
  ASSERT_TRUE(out.state.server_momentum.has_value());
  EXPECT_FALSE(nn::all_zero(*out.state.server_momentum));
}

TEST(RoundTest, EmptyClientIsSkippedWithWarning) {
  Federation f = make_federation(3, 10);
  f.clients[1].train = data::LabeledDataset{Tensor({0, 8}), {}, 4};
  const auto out = run_round(f.state, f.clients, base_config(train::FedAvg{}), f.test);
  EXPECT_EQ(out.record.client_ids, (std::vector<int>{0, 2}));
  ASSERT_FALSE(out.record.warnings.empty());
}

TEST(RoundTest, ConfigValidation) {
  Federation f = make_federation(2, 10);
  auto cfg = base_config(train::FedAvg{});
  cfg.participants = 3;
  EXPECT_THROW(run_round(f.state, f.clients, cfg, f.test), ConfigError);
  cfg.participants = 0;
  cfg.server_momentum = 1.5;
  EXPECT_THROW(run_round(f.state, f.clients, cfg, f.test), ConfigError);
}

}  // namespace
}  // namespace fedcog::fed
