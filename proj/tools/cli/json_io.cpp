#include "json_io.hpp"

#include "spec_file.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace finestrat::cli {

json number_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json vector_json(const Vector& v) {
    json out = json::array();
    for (Index i = 0; i < v.size(); ++i) out.push_back(number_json(v[i]));
    return out;
}

json matrix_json(const Matrix& m) {
    json out = json::array();
    for (Index i = 0; i < m.rows(); ++i) out.push_back(vector_json(m.row(i).transpose()));
    return out;
}

json partition_json(const GroupPartition& partition) {
    json j;
    j["k"] = partition.k;
    j["l"] = partition.l;
    j["groups"] = partition.groups;
    j["homogeneity"] = number_json(partition.homogeneity);
    j["pairing"] = partition.pairing ? json(*partition.pairing) : json(nullptr);
    j["pairing_statistic"] = number_json(partition.pairing_statistic);
    return j;
}

GroupPartition partition_from_json(const json& j) {
    GroupPartition p;
    try {
        p.k = j.at("k").get<int>();
        p.l = j.at("l").get<int>();
        p.groups = j.at("groups").get<std::vector<std::vector<Index>>>();
        if (j.contains("homogeneity") && j.at("homogeneity").is_number()) {
            p.homogeneity = j.at("homogeneity").get<double>();
        }
        if (j.contains("pairing") && !j.at("pairing").is_null()) {
            p.pairing = j.at("pairing").get<std::vector<std::size_t>>();
        }
    } catch (const json::exception& e) {
        throw SpecError(std::string("malformed partition in manifest: ") + e.what());
    }
    return p;
}

json region_json(const AcceptanceRegion& region) {
    json j;
    j["shape"] = to_string(region.shape);
    j["eps"] = number_json(region.eps);
    if (region.gamma_bar.size()) j["gamma_bar"] = vector_json(region.gamma_bar);
    if (region.U.size()) j["U"] = matrix_json(region.U);
    if (region.shape == RegionShape::polar || region.shape == RegionShape::rectangle_polar ||
        region.shape == RegionShape::pilot_wald) {
        j["p_exponent"] = number_json(region.p_exponent);
    }
    return j;
}

json report_json(const InferenceReport& report, const std::string& estimand) {
    json j;
    j["estimand"] = estimand;
    j["n"] = report.components.n;
    j["alpha"] = report.alpha;
    j["z"] = report.z;
    j["theta_hat"] = vector_json(report.theta_hat);
    j["theta_adj"] = vector_json(report.theta_adj);
    json fin_lo = json::array(), fin_hi = json::array(), pop_lo = json::array(), pop_hi = json::array();
    json contrasts = json::array();
    for (const auto& c : report.contrasts) {
        fin_lo.push_back(number_json(c.fin_lo));
        fin_hi.push_back(number_json(c.fin_hi));
        pop_lo.push_back(number_json(c.pop_lo));
        pop_hi.push_back(number_json(c.pop_hi));
        contrasts.push_back({{"c", vector_json(c.c)},
                             {"estimate", number_json(c.estimate)},
                             {"var_fin", number_json(c.var_fin)},
                             {"var_pop", number_json(c.var_pop)}});
    }
    j["ci_fin"] = {{"lo", fin_lo}, {"hi", fin_hi}};
    j["ci_pop"] = {{"lo", pop_lo}, {"hi", pop_hi}};
    const auto& comp = report.components;
    j["variance"] = {{"v1", matrix_json(comp.v1)}, {"v0", matrix_json(comp.v0)}, {"v10", matrix_json(comp.v10)},
                     {"u1", matrix_json(comp.u1)}, {"u0", matrix_json(comp.u0)}, {"V_pop", matrix_json(report.V_pop)}};
    j["contrasts"] = contrasts;
    j["flags"] = report.flags;
    return j;
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 initialisation failed");
    std::array<char, 1 << 16> buf;
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    std::string hex;
    char byte[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(byte, sizeof(byte), "%02x", digest[i]);
        hex += byte;
    }
    return hex;
}

void write_json_file(const std::string& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << doc.dump(2) << '\n';
}

}  // namespace finestrat::cli
