#ifndef FINESTRAT_STRATIFY_HPP
#define FINESTRAT_STRATIFY_HPP

#include "finestrat/rng.hpp"
#include "finestrat/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace finestrat {

enum class MatchMethod { sorted_1d, greedy_nn, random_within_cell };

MatchMethod parse_match_method(const std::string& name);
std::string to_string(MatchMethod method);

struct MatchConfig {
    int k = 2;
    int l = 1;
    std::vector<double> psi_weights;  // empty means all ones
    MatchMethod method = MatchMethod::greedy_nn;

    double p() const { return static_cast<double>(l) / k; }
    void validate(Index dim_psi) const;
};

/**
 * Disjoint groups of equal size k with l treated per group.
 *
 * `pairing`, when present, maps each group to its partner for collapsed-strata
 * variance estimation; it is a fixed-point-free involution.
 */
struct GroupPartition {
    std::vector<std::vector<Index>> groups;
    int k = 2;
    int l = 1;
    double homogeneity = 0.0;
    std::optional<std::vector<std::size_t>> pairing;
    double pairing_statistic = 0.0;

    Index n() const { return static_cast<Index>(groups.size()) * k; }
    double p() const { return static_cast<double>(l) / k; }

    /** Group index of every unit. */
    std::vector<std::size_t> group_of() const;
};

/** Throws ConfigError unless the groups exactly cover {0..n-1} with size k. */
void validate_partition(const GroupPartition& partition, Index n);

/** (1/n) sum_s sum_{i,j in s} |psi_i - psi_j|^2 over ordered pairs. */
double homogeneity_statistic(const std::vector<std::vector<Index>>& groups, const Matrix& psi);

/** Scales column j of psi by weights[j]; empty weights leave psi unchanged. */
Matrix weighted_psi(const Matrix& psi, const std::vector<double>& weights);

/**
 * Match units into k-tuples on (weighted) psi. The groups depend only on psi
 * and, for random-within-cell, on the rng stream.
 */
GroupPartition match_k_tuples(const Matrix& psi, const MatchConfig& cfg, Rng& rng);

/** Random groups of size k within each labelled cell. */
GroupPartition coarse_strata(const std::vector<std::string>& labels, int k, int l, Rng& rng);

/** Complete randomization as a single coarse cell. */
GroupPartition random_groups(Index n, int k, int l, Rng& rng);

/**
 * Greedily pairs group centroids of psi and records the pairing and its
 * statistic (1/n) sum_s |centroid_s - centroid_rho(s)|^2.
 */
GroupPartition pair_groups_by_centroid(GroupPartition partition, const Matrix& psi);

/** Enlarged groups s ∪ rho(s), each listed once. Requires a pairing. */
std::vector<std::vector<Index>> collapsed_groups(const GroupPartition& partition);

/**
 * Greedy nearest-neighbour grouping: repeatedly takes the unmatched point
 * whose nearest unmatched neighbour is farthest away and groups it with its
 * k-1 nearest unmatched neighbours. Ties go to the lowest index.
 */
std::vector<std::vector<Index>> greedy_nn_groups(const Matrix& points, int k);

}  // namespace finestrat

#endif  // FINESTRAT_STRATIFY_HPP
