#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "cider/evaluation.hpp"
#include "cider/synthetic.hpp"

namespace cider::eval {
namespace {

TEST(ScoreUser, MatchesDoubleLoop) {
    Rng rng(1);
    const Matrix items = rng.normal_matrix(1000, 10, 1.0);
    for (int u = 0; u < 10; ++u) {
        const Eigen::RowVectorXd user = rng.normal_matrix(1, 10, 1.0);
        const auto s = score_user(user, items);
        for (Eigen::Index j = 0; j < items.rows(); ++j) {
            double ref = 0.0;
            for (Eigen::Index k = 0; k < 10; ++k) ref += user(k) * items(j, k);
            EXPECT_NEAR(s(j), ref, 1e-10);
        }
    }
    EXPECT_THROW(score_user(Eigen::RowVectorXd::Zero(3), items), ContractError);
}

TEST(RankOf, ZeroUserRanksByIndex) {
    const Matrix items = Matrix::Random(6, 3);
    const Eigen::RowVectorXd zero = Eigen::RowVectorXd::Zero(3);
    EXPECT_EQ(rank_of(zero, items, 0, {1, 2, 3}), 1);
    EXPECT_EQ(rank_of(zero, items, 4, {1, 2, 5}), 3);
}

TEST(RankOf, AlignedCandidateRanksFirst) {
    Matrix items = Matrix::Identity(5, 5);
    const Eigen::RowVectorXd user = items.row(3);
    EXPECT_EQ(rank_of(user, items, 3, {0, 1, 2, 4}), 1);
    EXPECT_EQ(rank_of(user, items, 0, {1, 2, 3, 4}), 2);
}

TEST(ComputeMetrics, Examples) {
    auto m = compute_metrics({1});
    EXPECT_DOUBLE_EQ(m["MRR"], 1.0);
    EXPECT_DOUBLE_EQ(m["HR@10"], 1.0);
    EXPECT_DOUBLE_EQ(m["NDCG@10"], 1.0);

    m = compute_metrics({4});
    EXPECT_DOUBLE_EQ(m["MRR"], 0.25);
    EXPECT_NEAR(m["NDCG@10"], 1.0 / std::log2(5.0), 1e-15);
    EXPECT_NEAR(m["NDCG@10"], 0.4307, 1e-4);

    m = compute_metrics({25});
    EXPECT_DOUBLE_EQ(m["HR@10"], 0.0);
    EXPECT_DOUBLE_EQ(m["HR@20"], 0.0);
    EXPECT_DOUBLE_EQ(m["HR@30"], 1.0);
    EXPECT_THROW(compute_metrics({}), ContractError);
    EXPECT_THROW(compute_metrics({0}), ContractError);
}

MetricValues brute_force(const std::vector<int>& ranks) {
    MetricValues m;
    const double n = static_cast<double>(ranks.size());
    double mrr = 0;
    for (int r : ranks) mrr += 1.0 / r;
    m["MRR"] = mrr / n;
    for (int k : {10, 20, 30}) {
        double hits = 0;
        double gain = 0;
        for (int r : ranks) {
            if (r > k) continue;
            hits += 1;
            gain += 1.0 / std::log2(r + 1.0);
        }
        m["HR@" + std::to_string(k)] = hits / n;
        m["NDCG@" + std::to_string(k)] = gain / n;
    }
    return m;
}

TEST(ComputeMetrics, AgreesWithBruteForceOnRandomLists) {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        std::vector<int> ranks(1 + rng.below(50));
        for (auto& r : ranks) r = 1 + static_cast<int>(rng.below(1000));
        const auto m = compute_metrics(ranks);
        const auto ref = brute_force(ranks);
        ASSERT_EQ(m.size(), ref.size());
        for (const auto& [name, v] : ref) {
            EXPECT_EQ(m.at(name), v) << name;
        }
        EXPECT_TRUE(metrics_consistent(m));
    }
}

TEST(ComputeMetrics, ImprovingARankNeverHurts) {
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
        std::vector<int> ranks(20);
        for (auto& r : ranks) r = 2 + static_cast<int>(rng.below(100));
        const auto before = compute_metrics(ranks);
        ranks[rng.below(20)] -= 1;
        const auto after = compute_metrics(ranks);
        for (const auto& [name, v] : before) EXPECT_GE(after.at(name), v) << name;
    }
}

TEST(AggregateRuns, MeanAndSampleStd) {
    std::map<std::string, MetricValues> a{{"x", {{"MRR", 0.4}}}};
    std::map<std::string, MetricValues> b{{"x", {{"MRR", 0.6}}}};
    auto r = aggregate_runs({a, b});
    EXPECT_NEAR(r["x"]["MRR"].mean, 0.5, 1e-15);
    EXPECT_NEAR(r["x"]["MRR"].std, std::sqrt(0.02), 1e-15);
    EXPECT_NEAR(r["x"]["MRR"].std, 0.1414, 1e-4);

    r = aggregate_runs({a});
    EXPECT_DOUBLE_EQ(r["x"]["MRR"].std, 0.0);
    r = aggregate_runs(std::vector<std::map<std::string, MetricValues>>(6, a));
    EXPECT_DOUBLE_EQ(r["x"]["MRR"].std, 0.0);
    EXPECT_DOUBLE_EQ(r["x"]["MRR"].mean, 0.4);

    std::map<std::string, MetricValues> other{{"x", {{"HR@10", 0.4}}}};
    EXPECT_THROW(aggregate_runs({a, other}), ContractError);
    EXPECT_THROW(aggregate_runs({}), ContractError);
}

TEST(Report, JsonAndCsv) {
    MetricReport r;
    r["x"]["MRR"] = {0.25, 0.01};
    r["y"]["HR@10"] = {0.5, 0.0};
    const auto j = to_json(r);
    EXPECT_DOUBLE_EQ(j["x"]["MRR"]["mean"].get<double>(), 0.25);
    const auto back = report_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_DOUBLE_EQ(back.at("x").at("MRR").std, 0.01);
    EXPECT_DOUBLE_EQ(back.at("y").at("HR@10").mean, 0.5);

    std::ostringstream os;
    write_report_csv(os, {{{{"ratio", "25"}}, r}});
    EXPECT_EQ(os.str(), "ratio,domain,metric,mean,std\n25,x,MRR,0.25,0.01\n25,y,HR@10,0.5,0\n");
}

data::InteractionDataset wide_dataset() {
    synth::SyntheticSpec spec;
    spec.users = 1000;
    spec.overlap = 1000;
    spec.items = 1100;
    spec.interactions = 5;
    spec.clusters = 5;
    spec.seed = 9;
    return synth::generate_synthetic(spec);
}

TEST(Evaluate, UntrainedModelIsNearUniformRanking) {
    const auto ds = wide_dataset();
    CiderModel model({}, objective::Variant::a, DomainSizes::of(ds), 3);
    const auto reps = model.infer(ds, training_adjacency(ds), {});
    const std::array<data::NegativeSamplePool, 2> pools{data::sample_negatives(ds, Domain::x, 4),
                                                        data::sample_negatives(ds, Domain::y, 4)};
    std::vector<int> ranks;
    for (auto split : {data::Split::test, data::Split::validation}) {
        const auto e = evaluate(reps, pools, split);
        for (const auto& [d, de] : e.domains) ranks.insert(ranks.end(), de.ranks.begin(), de.ranks.end());
    }
    ASSERT_EQ(ranks.size(), 400u);
    const double mrr = compute_metrics(ranks)["MRR"];

    double expected = 0.0;
    for (int r = 1; r <= 1000; ++r) expected += 1.0 / r;
    expected /= 1000.0;
    EXPECT_NEAR(expected, 0.00748, 1e-5);

    // Monte-Carlo band of the mean reciprocal rank of 400 uniform ranks.
    Rng rng(5);
    std::vector<double> sims;
    for (int s = 0; s < 4000; ++s) {
        double sum = 0.0;
        for (int u = 0; u < 400; ++u) sum += 1.0 / static_cast<double>(1 + rng.below(1000));
        sims.push_back(sum / 400.0);
    }
    std::sort(sims.begin(), sims.end());
    const double lo = sims[static_cast<std::size_t>(0.0025 * sims.size())];
    const double hi = sims[static_cast<std::size_t>(0.9975 * sims.size())];
    EXPECT_GE(mrr, lo);
    EXPECT_LE(mrr, hi);
    EXPECT_NEAR(mrr, expected, 0.5 * expected);
}

TEST(Evaluate, PlantedRepresentationsScorePerfectly) {
    const auto ds = wide_dataset();
    const std::array<data::NegativeSamplePool, 2> pools{data::sample_negatives(ds, Domain::x, 4, 50),
                                                        data::sample_negatives(ds, Domain::y, 4, 50)};
    InferenceResult reps;
    for (const Domain d : {Domain::x, Domain::y}) {
        const auto k = index_of(d);
        reps.items[k] = Matrix::Identity(ds.domain(d).num_items(), ds.domain(d).num_items());
        reps.users[k] = Matrix::Zero(ds.domain(d).num_users(), ds.domain(d).num_items());
        for (const auto& inst : pools[k].test) reps.users[k](inst.user, inst.positive) = 1.0;
    }
    const auto e = evaluate(reps, pools, data::Split::test);
    EXPECT_DOUBLE_EQ(e.domains.at("x").metrics.at("MRR"), 1.0);
    EXPECT_DOUBLE_EQ(e.domains.at("y").metrics.at("HR@10"), 1.0);
}

TEST(Evaluate, DeterministicAndPoolChecked) {
    const auto ds = wide_dataset();
    CiderModel model({}, objective::Variant::d, DomainSizes::of(ds), 3);
    const auto adj = training_adjacency(ds);
    std::array<data::NegativeSamplePool, 2> pools{data::sample_negatives(ds, Domain::x, 4, 100),
                                                  data::sample_negatives(ds, Domain::y, 4, 100)};
    const auto a = evaluate(model.infer(ds, adj, {}), pools, data::Split::test);
    const auto b = evaluate(model.infer(ds, adj, {}), pools, data::Split::test);
    EXPECT_EQ(a.domains.at("x").ranks, b.domains.at("x").ranks);
    EXPECT_EQ(a.domains.at("y").metrics, b.domains.at("y").metrics);

    std::swap(pools[0], pools[1]);
    EXPECT_THROW(evaluate(model.infer(ds, adj, {}), pools, data::Split::test), ContractError);
    std::swap(pools[0], pools[1]);
    pools[0].test.front().negatives.front() = 5000;
    EXPECT_THROW(evaluate(model.infer(ds, adj, {}), pools, data::Split::test), ContractError);
}

}  // namespace
}  // namespace cider::eval
