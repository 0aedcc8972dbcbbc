#include "finestrat/randomize.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

namespace finestrat {

namespace {

// Partial Fisher-Yates: the first `l` entries of `idx` become a uniform subset.
void choose_prefix(std::vector<Index>& idx, int l, Rng& rng) {
    const std::size_t m = idx.size();
    for (std::size_t t = 0; t < static_cast<std::size_t>(l); ++t) {
        const std::size_t j = t + rng.index(m - t);
        std::swap(idx[t], idx[j]);
    }
}

}  // namespace

void draw_stratified_into(const GroupPartition& partition, Rng& rng, Assignment& d) {
    d.setZero();
    std::vector<Index> idx;
    for (const auto& g : partition.groups) {
        idx.assign(g.begin(), g.end());
        choose_prefix(idx, partition.l, rng);
        for (int t = 0; t < partition.l; ++t) d[idx[t]] = 1;
    }
}

AssignmentDraw draw_stratified(const GroupPartition& partition, Rng& rng) {
    AssignmentDraw out;
    out.d = Assignment::Zero(partition.n());
    draw_stratified_into(partition, rng, out.d);
    return out;
}

AssignmentDraw draw_complete(Index n, double p, Rng& rng) {
    const double treated = static_cast<double>(n) * p;
    const double rounded = std::round(treated);
    if (!(p > 0.0 && p < 1.0) || std::abs(treated - rounded) > 1e-9) {
        throw ConfigError("complete randomization needs n*p integer, got n=" + std::to_string(n) +
                          ", p=" + std::to_string(p));
    }
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    choose_prefix(idx, static_cast<int>(rounded), rng);
    AssignmentDraw out;
    out.d = Assignment::Zero(n);
    for (Index t = 0; t < static_cast<Index>(rounded); ++t) out.d[idx[t]] = 1;
    return out;
}

void write_assignment(std::ostream& out, const Assignment& d, const std::vector<std::string>& ids) {
    out << "id,d\n";
    for (Index i = 0; i < d.size(); ++i) {
        out << (static_cast<std::size_t>(i) < ids.size() ? ids[i] : std::to_string(i)) << ','
            << d[i] << '\n';
    }
}

}  // namespace finestrat
