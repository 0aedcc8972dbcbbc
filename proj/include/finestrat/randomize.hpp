#ifndef FINESTRAT_RANDOMIZE_HPP
#define FINESTRAT_RANDOMIZE_HPP

#include "finestrat/rng.hpp"
#include "finestrat/stratify.hpp"
#include "finestrat/types.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace finestrat {

struct AssignmentDraw {
    Assignment d;
    long draw_index = 1;  // 1-based attempt that produced d
};

/** Exactly l uniformly chosen treated units in every group. */
AssignmentDraw draw_stratified(const GroupPartition& partition, Rng& rng);

/** Same as draw_stratified but writes into `d`, which must have size n. */
void draw_stratified_into(const GroupPartition& partition, Rng& rng, Assignment& d);

/** Uniformly random subset of size n*p. Throws ConfigError unless n*p is an integer. */
AssignmentDraw draw_complete(Index n, double p, Rng& rng);

/** CSV with header "id,d". */
void write_assignment(std::ostream& out, const Assignment& d, const std::vector<std::string>& ids);

}  // namespace finestrat

#endif  // FINESTRAT_RANDOMIZE_HPP
