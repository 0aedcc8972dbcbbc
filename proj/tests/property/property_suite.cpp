// Exact-arithmetic properties. Data are small dyadic rationals so that every
// sum and group mean is computed without rounding and equalities hold bitwise.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "finestrat/adjust.hpp"
#include "finestrat/randomize.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/simulate.hpp"

#include <set>

using namespace finestrat;

namespace {

Matrix dyadic(Index n, Index m, Rng& rng) {
    Matrix x(n, m);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) x(i, j) = (static_cast<double>(rng.index(129)) - 64.0) / 8.0;
    return x;
}

struct Case {
    int k, l;
    MatchMethod method;
};

const Case kCases[] = {{2, 1, MatchMethod::sorted_1d}, {2, 1, MatchMethod::greedy_nn},
                       {4, 2, MatchMethod::greedy_nn}, {4, 2, MatchMethod::sorted_1d},
                       {4, 1, MatchMethod::greedy_nn}, {8, 4, MatchMethod::sorted_1d}};

ExperimentFrame frame_for(const Assignment& d, const Vector& y, double p) {
    ExperimentFrame f;
    f.d = d;
    f.y = y;
    f.p = p;
    return f;
}

}  // namespace

TEST_CASE("partitions cover every unit once with k per group and l treated") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const Case& c : kCases) {
            Rng rng(seed, 7);
            const Index n = 8 * (5 + static_cast<Index>(seed));
            const Matrix psi = dyadic(n, c.method == MatchMethod::sorted_1d ? 1 : 3, rng);
            const GroupPartition part = match_k_tuples(psi, MatchConfig{c.k, c.l, {}, c.method}, rng);
            std::vector<int> seen(static_cast<std::size_t>(n), 0);
            for (const auto& g : part.groups) {
                CHECK(static_cast<int>(g.size()) == c.k);
                for (Index i : g) ++seen[static_cast<std::size_t>(i)];
            }
            CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
            const Assignment d = draw_stratified(part, rng).d;
            for (const auto& g : part.groups) {
                int treated = 0;
                for (Index i : g) treated += d[i];
                CHECK(treated == c.l);
            }
            CHECK(d.sum() == n * c.l / c.k);
        }
    }
}

TEST_CASE("collapsed groups partition the units") {
    Rng rng(1, 0);
    const Matrix psi = dyadic(64, 2, rng);
    GroupPartition part = match_k_tuples(psi, MatchConfig{2, 1, {}, MatchMethod::greedy_nn}, rng);
    part = pair_groups_by_centroid(part, psi);
    const auto& rho = *part.pairing;
    for (std::size_t s = 0; s < rho.size(); ++s) {
        CHECK(rho[s] != s);
        CHECK(rho[rho[s]] == s);
    }
    std::set<Index> units;
    for (const auto& g : collapsed_groups(part)) {
        CHECK(g.size() == 4);
        units.insert(g.begin(), g.end());
    }
    CHECK(units.size() == 64);
}

TEST_CASE("demeaned covariates sum to zero in every group and preserve HT sums") {
    for (const Case& c : kCases) {
        Rng rng(2, 0);
        const Index n = 64;
        const Matrix w = dyadic(n, 3, rng);
        const GroupPartition part = random_groups(n, c.k, c.l, rng);
        const Matrix wc = within_tuple_demean(w, part);
        for (const auto& g : part.groups) {
            Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(3);
            for (Index i : g) s += wc.row(i);
            CHECK(s.isZero(0.0));
        }
        if (c.l * 2 == c.k) {
            const Assignment d = draw_stratified(part, rng).d;
            const Vector h = horvitz_thompson_weights(d, 0.5);
            for (const auto& g : part.groups) {
                double hs = 0.0;
                for (Index i : g) hs += h[i];
                CHECK(hs == 0.0);
            }
            CHECK((wc.transpose() * h - w.transpose() * h).isZero(0.0));
        }
    }
}

TEST_CASE("alpha is exactly beta1 minus beta0") {
    Rng rng(3, 0);
    const Index n = 48;
    const Matrix w = dyadic(n, 2, rng);
    GroupPartition part = match_k_tuples(w.leftCols(1), MatchConfig{2, 1, {}, MatchMethod::sorted_1d}, rng);
    const Assignment d = draw_stratified(part, rng).d;
    const Vector y = dyadic(n, 1, rng).col(0);
    const ExperimentFrame f = frame_for(d, y, 0.5);
    const AdjustmentFit adj = fit_adjustment(solve_gmm(f, score_sate()), f, part, w);
    CHECK(adj.alpha == adj.beta1 - adj.beta0);
}

TEST_CASE("adjustment is translation invariant bit for bit") {
    Rng rng(4, 0);
    const Index n = 64;
    const Matrix w = dyadic(n, 2, rng);
    for (const Case& c : kCases) {
        GroupPartition part = random_groups(n, c.k, c.l, rng);
        const Assignment d = draw_stratified(part, rng).d;
        const Vector y = dyadic(n, 1, rng).col(0);
        const ExperimentFrame f = frame_for(d, y, static_cast<double>(c.l) / c.k);
        const GmmFit fit = solve_gmm(f, score_sate());
        Matrix shifted = w;
        shifted.col(0).array() += 4.0;
        shifted.col(1).array() -= 2.5;
        const AdjustmentFit a = fit_adjustment(fit, f, part, w);
        const AdjustmentFit b = fit_adjustment(fit, f, part, shifted);
        CHECK(a.theta_adj[0] == b.theta_adj[0]);
        CHECK(a.alpha == b.alpha);
    }
}

TEST_CASE("constant effects are recovered exactly") {
    Rng rng(5, 0);
    const Index n = 40;
    const Matrix w = dyadic(n, 1, rng);
    const GroupPartition part = match_k_tuples(w, MatchConfig{2, 1, {}, MatchMethod::sorted_1d}, rng);
    const Assignment d = draw_stratified(part, rng).d;
    Vector y(n);
    for (Index i = 0; i < n; ++i) y[i] = 0.75 * d[i] + 3.0;
    const ExperimentFrame f = frame_for(d, y, 0.5);
    CHECK(solve_gmm(f, score_sate()).theta[0] == 0.75);
}

TEST_CASE("fixed seeds reproduce partitions, assignments and acceptance") {
    for (std::uint64_t seed : {1u, 99u, 2024u}) {
        Rng a(seed, 3), b(seed, 3);
        const Matrix xa = dyadic(80, 3, a), xb = dyadic(80, 3, b);
        CHECK(xa == xb);
        const GroupPartition pa = match_k_tuples(xa, MatchConfig{4, 2, {}, MatchMethod::greedy_nn}, a);
        const GroupPartition pb = match_k_tuples(xb, MatchConfig{4, 2, {}, MatchMethod::greedy_nn}, b);
        CHECK(pa.groups == pb.groups);
        const MahalanobisImbalance ea(xa, pa), eb(xb, pb);
        const AcceptanceRegion region = mahalanobis_region(3, 0.1);
        const RerandomizeResult ra = rerandomize(pa, ea, region, a);
        const RerandomizeResult rb = rerandomize(pb, eb, region, b);
        CHECK(ra.draw.d == rb.draw.d);
        CHECK(ra.draw.draw_index == rb.draw.draw_index);
        CHECK(ra.penalty == rb.penalty);
    }
}

TEST_CASE("fixed seeds reproduce Monte Carlo results across thread counts") {
    MonteCarloConfig cfg;
    cfg.dgp.n = 60;
    cfg.replicates = 40;
    for (const char* name : {"C", "S", "SR"}) cfg.designs.push_back(named_design(name, 2, 5));
    cfg.designs.back().accept_alpha = 0.1;
    const MonteCarloResult a = run_monte_carlo(cfg);
    cfg.threads = 4;
    const MonteCarloResult b = run_monte_carlo(cfg);
    for (std::size_t j = 0; j < a.outcomes.size(); ++j) {
        for (std::size_t r = 0; r < a.outcomes[j].size(); ++r) {
            CHECK(a.outcomes[j][r].theta_hat == b.outcomes[j][r].theta_hat);
            CHECK(a.outcomes[j][r].theta_adj == b.outcomes[j][r].theta_adj);
            CHECK(a.outcomes[j][r].pop_lo[1] == b.outcomes[j][r].pop_lo[1]);
        }
    }
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].mse == b.rows[i].mse);
}
