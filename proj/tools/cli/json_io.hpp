#ifndef FINESTRAT_CLI_JSON_IO_HPP
#define FINESTRAT_CLI_JSON_IO_HPP

#include "finestrat/inference.hpp"
#include "finestrat/rerandomize.hpp"
#include "finestrat/stratify.hpp"

#include "json.hpp"

#include <string>

namespace finestrat::cli {

using nlohmann::json;

json matrix_json(const Matrix& m);
json vector_json(const Vector& v);
/** Non-finite values become null. */
json number_json(double v);

json partition_json(const GroupPartition& partition);
GroupPartition partition_from_json(const json& j);
json region_json(const AcceptanceRegion& region);
json report_json(const InferenceReport& report, const std::string& estimand);

/** Lower-case hex SHA-256 digest of a file's bytes. */
std::string sha256_file(const std::string& path);

void write_json_file(const std::string& path, const json& doc);

}  // namespace finestrat::cli

#endif  // FINESTRAT_CLI_JSON_IO_HPP
