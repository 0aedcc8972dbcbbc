#include "finestrat/stratify.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace finestrat {

MatchMethod parse_match_method(const std::string& name) {
    if (name == "sorted-1d") return MatchMethod::sorted_1d;
    if (name == "greedy-nn") return MatchMethod::greedy_nn;
    if (name == "random-within-cell") return MatchMethod::random_within_cell;
    throw ConfigError("unknown match method '" + name + "'");
}

std::string to_string(MatchMethod method) {
    switch (method) {
    case MatchMethod::sorted_1d: return "sorted-1d";
    case MatchMethod::greedy_nn: return "greedy-nn";
    case MatchMethod::random_within_cell: return "random-within-cell";
    }
    return "unknown";
}

void MatchConfig::validate(Index dim_psi) const {
    if (k < 2) throw ConfigError("group size k must be at least 2");
    if (l < 1 || l > k - 1) {
        throw ConfigError("treated per group l=" + std::to_string(l) + " must lie in [1, k-1]");
    }
    if (!psi_weights.empty() && static_cast<Index>(psi_weights.size()) != dim_psi) {
        throw ConfigError("psi weights length does not match psi dimension");
    }
    for (double w : psi_weights) {
        if (!(w > 0.0)) throw ConfigError("psi weights must be strictly positive");
    }
    if (method == MatchMethod::sorted_1d && dim_psi != 1) {
        throw ConfigError("sorted-1d matching requires exactly one psi column, got " +
                          std::to_string(dim_psi));
    }
}

std::vector<std::size_t> GroupPartition::group_of() const {
    std::vector<std::size_t> out(static_cast<std::size_t>(n()));
    for (std::size_t s = 0; s < groups.size(); ++s) {
        for (Index i : groups[s]) out[static_cast<std::size_t>(i)] = s;
    }
    return out;
}

void validate_partition(const GroupPartition& partition, Index n) {
    if (partition.k < 2 || partition.l < 1 || partition.l >= partition.k) {
        throw ConfigError("invalid partition parameters k=" + std::to_string(partition.k) +
                          ", l=" + std::to_string(partition.l));
    }
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    Index covered = 0;
    for (const auto& g : partition.groups) {
        if (static_cast<int>(g.size()) != partition.k) {
            throw ConfigError("partition group of size " + std::to_string(g.size()) +
                              ", expected " + std::to_string(partition.k));
        }
        for (Index i : g) {
            if (i < 0 || i >= n) throw ConfigError("partition index out of range");
            if (seen[i]) throw ConfigError("partition groups overlap at unit " + std::to_string(i));
            seen[i] = 1;
            ++covered;
        }
    }
    if (covered != n) throw ConfigError("partition does not cover all units");
    if (partition.pairing) {
        const auto& rho = *partition.pairing;
        if (rho.size() != partition.groups.size()) throw ConfigError("pairing has wrong length");
        for (std::size_t s = 0; s < rho.size(); ++s) {
            if (rho[s] >= rho.size() || rho[s] == s || rho[rho[s]] != s) {
                throw ConfigError("pairing is not a fixed-point-free involution");
            }
        }
    }
}

double homogeneity_statistic(const std::vector<std::vector<Index>>& groups, const Matrix& psi) {
    if (psi.cols() == 0 || psi.rows() == 0) return 0.0;
    double total = 0.0;
    for (const auto& g : groups) {
        for (Index i : g) {
            for (Index j : g) total += (psi.row(i) - psi.row(j)).squaredNorm();
        }
    }
    return total / static_cast<double>(psi.rows());
}

Matrix weighted_psi(const Matrix& psi, const std::vector<double>& weights) {
    if (weights.empty()) return psi;
    Matrix out = psi;
    for (Index j = 0; j < psi.cols(); ++j) out.col(j) *= weights[j];
    return out;
}

std::vector<std::vector<Index>> greedy_nn_groups(const Matrix& points, int k) {
    const Index n = points.rows();
    // Row-major copy for cache-friendly distance evaluation.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pts = points;
    const Index d = pts.cols();
    auto dist = [&](Index a, Index b) {
        const double* pa = pts.data() + a * d;
        const double* pb = pts.data() + b * d;
        double s = 0.0;
        for (Index c = 0; c < d; ++c) {
            const double diff = pa[c] - pb[c];
            s += diff * diff;
        }
        return s;
    };

    std::vector<char> matched(static_cast<std::size_t>(n), 0);
    std::vector<Index> nn(static_cast<std::size_t>(n), -1);
    std::vector<double> nnd(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    auto refresh = [&](Index i) {
        nn[i] = -1;
        nnd[i] = std::numeric_limits<double>::infinity();
        for (Index j = 0; j < n; ++j) {
            if (j == i || matched[j]) continue;
            const double dij = dist(i, j);
            if (dij < nnd[i]) {  // strict: lowest index wins ties
                nnd[i] = dij;
                nn[i] = j;
            }
        }
    };
    for (Index i = 0; i < n; ++i) refresh(i);

    std::vector<std::vector<Index>> groups;
    groups.reserve(static_cast<std::size_t>(n / k));
    std::vector<std::pair<double, Index>> cand;
    Index remaining = n;
    while (remaining > 0) {
        Index seed = -1;
        double worst = -1.0;
        for (Index i = 0; i < n; ++i) {
            if (!matched[i] && nnd[i] > worst) {
                worst = nnd[i];
                seed = i;
            }
        }
        cand.clear();
        for (Index j = 0; j < n; ++j) {
            if (j != seed && !matched[j]) cand.emplace_back(dist(seed, j), j);
        }
        const auto take = static_cast<std::size_t>(k - 1);
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
        std::vector<Index> group{seed};
        for (std::size_t t = 0; t < take; ++t) group.push_back(cand[t].second);
        std::sort(group.begin(), group.end());
        for (Index i : group) matched[i] = 1;
        remaining -= k;
        for (Index i = 0; i < n; ++i) {
            if (matched[i] || nn[i] < 0 || !matched[nn[i]]) continue;
            refresh(i);
        }
        groups.push_back(std::move(group));
    }
    return groups;
}

namespace {

std::vector<std::vector<Index>> sorted_blocks(const Matrix& psi, int k) {
    std::vector<Index> order(static_cast<std::size_t>(psi.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return psi(a, 0) < psi(b, 0); });
    std::vector<std::vector<Index>> groups;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(k)) {
        std::vector<Index> g(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(start + k));
        std::sort(g.begin(), g.end());
        groups.push_back(std::move(g));
    }
    return groups;
}

void require_divisible(Index n, int k) {
    if (n % k != 0) {
        throw ConfigError("unit count n=" + std::to_string(n) + " is not divisible by group size k=" +
                          std::to_string(k));
    }
}

}  // namespace

GroupPartition match_k_tuples(const Matrix& psi, const MatchConfig& cfg, Rng& rng) {
    cfg.validate(psi.cols());
    require_divisible(psi.rows(), cfg.k);
    const Matrix z = weighted_psi(psi, cfg.psi_weights);

    GroupPartition out;
    out.k = cfg.k;
    out.l = cfg.l;
    switch (cfg.method) {
    case MatchMethod::sorted_1d:
        out.groups = sorted_blocks(z, cfg.k);
        break;
    case MatchMethod::greedy_nn:
        out.groups = greedy_nn_groups(z, cfg.k);
        break;
    case MatchMethod::random_within_cell: {
        std::vector<std::string> labels;
        labels.reserve(static_cast<std::size_t>(z.rows()));
        for (Index i = 0; i < z.rows(); ++i) {
            std::ostringstream key;
            for (Index j = 0; j < z.cols(); ++j) key << z(i, j) << '|';
            labels.push_back(key.str());
        }
        out = coarse_strata(labels, cfg.k, cfg.l, rng);
        break;
    }
    }
    out.homogeneity = homogeneity_statistic(out.groups, z);
    validate_partition(out, psi.rows());
    return out;
}

GroupPartition coarse_strata(const std::vector<std::string>& labels, int k, int l, Rng& rng) {
    MatchConfig{k, l, {}, MatchMethod::random_within_cell}.validate(0);
    std::vector<std::string> order;
    std::map<std::string, std::vector<Index>> cells;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& cell = cells[labels[i]];
        if (cell.empty()) order.push_back(labels[i]);
        cell.push_back(static_cast<Index>(i));
    }
    std::string bad;
    for (const auto& label : order) {
        const auto size = cells[label].size();
        if (size % static_cast<std::size_t>(k) != 0) {
            if (!bad.empty()) bad += "; ";
            bad += "cell " + label + " size " + std::to_string(size) + " not divisible by " +
                   std::to_string(k);
        }
    }
    if (!bad.empty()) throw ConfigError(bad);

    GroupPartition out;
    out.k = k;
    out.l = l;
    for (const auto& label : order) {
        auto members = cells[label];
        std::shuffle(members.begin(), members.end(), rng.engine());
        for (std::size_t start = 0; start < members.size(); start += static_cast<std::size_t>(k)) {
            std::vector<Index> g(members.begin() + static_cast<std::ptrdiff_t>(start),
                                 members.begin() + static_cast<std::ptrdiff_t>(start + k));
            std::sort(g.begin(), g.end());
            out.groups.push_back(std::move(g));
        }
    }
    validate_partition(out, static_cast<Index>(labels.size()));
    return out;
}

GroupPartition random_groups(Index n, int k, int l, Rng& rng) {
    require_divisible(n, k);
    return coarse_strata(std::vector<std::string>(static_cast<std::size_t>(n), "all"), k, l, rng);
}

GroupPartition pair_groups_by_centroid(GroupPartition partition, const Matrix& psi) {
    const auto m = partition.groups.size();
    if (m % 2 != 0) {
        throw ConfigError("centroid pairing needs an even number of groups, got " + std::to_string(m));
    }
    Matrix centroids = Matrix::Zero(static_cast<Index>(m), psi.cols());
    for (std::size_t s = 0; s < m; ++s) {
        for (Index i : partition.groups[s]) centroids.row(static_cast<Index>(s)) += psi.row(i);
        centroids.row(static_cast<Index>(s)) /= static_cast<double>(partition.groups[s].size());
    }
    std::vector<std::size_t> rho(m);
    for (const auto& pair : greedy_nn_groups(centroids, 2)) {
        rho[static_cast<std::size_t>(pair[0])] = static_cast<std::size_t>(pair[1]);
        rho[static_cast<std::size_t>(pair[1])] = static_cast<std::size_t>(pair[0]);
    }
    double stat = 0.0;
    for (std::size_t s = 0; s < m; ++s) {
        stat += (centroids.row(static_cast<Index>(s)) - centroids.row(static_cast<Index>(rho[s])))
                    .squaredNorm();
    }
    partition.pairing = std::move(rho);
    partition.pairing_statistic = psi.rows() > 0 ? stat / static_cast<double>(psi.rows()) : 0.0;
    return partition;
}

std::vector<std::vector<Index>> collapsed_groups(const GroupPartition& partition) {
    if (!partition.pairing) {
        throw ConfigError("collapsed strata require a group pairing; call pair_groups_by_centroid");
    }
    const auto& rho = *partition.pairing;
    std::vector<std::vector<Index>> out;
    for (std::size_t s = 0; s < rho.size(); ++s) {
        if (rho[s] < s) continue;
        std::vector<Index> g = partition.groups[s];
        g.insert(g.end(), partition.groups[rho[s]].begin(), partition.groups[rho[s]].end());
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace finestrat
