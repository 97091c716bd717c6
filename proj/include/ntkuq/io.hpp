#pragma once

// JSON views of the library's result types (JSON-lines stores and CLI output).

#include <cmath>
#include <ostream>
#include <string>

#include <json.hpp>

#include "ntkuq/finite_width.hpp"
#include "ntkuq/loss_stats.hpp"
#include "ntkuq/posterior.hpp"
#include "ntkuq/scaling.hpp"

namespace ntkuq {

using Json = nlohmann::json;

/// NaN/Inf become null so every emitted line is valid JSON.
inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const LossStats &s) {
    return Json{{"mu_L", json_number(s.mu_L)},
                {"var_L", json_number(s.var_L)},
                {"eps_L", s.eps_L ? json_number(*s.eps_L) : Json(nullptr)},
                {"n_test", s.n_test},
                {"n_out", s.n_out},
                {"method", s.method}};
}

/// One record per test point: {id, mean[], var}.
inline void write_posterior_jsonl(std::ostream &os, const PredictivePosterior &post) {
    for (Index i = 0; i < post.n_test(); ++i) {
        Json mean = Json::array();
        for (Index j = 0; j < post.n_out(); ++j) { mean.push_back(post.mean(i, j)); }
        const Index id = post.test_ids.empty() ? i : post.test_ids[static_cast<std::size_t>(i)];
        os << Json{{"id", id}, {"mean", mean}, {"var", post.cov(i, i)}}.dump() << '\n';
    }
}

inline Json to_json(const EnsembleRunRecord &r) {
    return Json{{"seed", r.seed},
                {"final_test_loss", json_number(r.final_test_loss)},
                {"best_validation_loss", json_number(r.best_validation_loss)},
                {"epochs_run", r.epochs_run},
                {"best_epoch", r.best_epoch},
                {"stop_reason", to_string(r.stop_reason)},
                {"eta", json_number(r.eta)}};
}

inline Json to_json(const ScalingFit &f) {
    return Json{{"exponent", f.exponent},
                {"intercept", f.intercept},
                {"slope_sigma", f.slope_sigma},
                {"n_points", f.n_points},
                {"r_squared", f.r_squared}};
}

inline Json to_json(const FlatnessReport &r) {
    return Json{{"verdict", to_string(r.verdict)},
                {"exponent", r.exponent},
                {"slope_sigma", r.slope_sigma},
                {"threshold", r.threshold},
                {"within_threshold", r.within_threshold},
                {"within_two_sigma", r.within_two_sigma}};
}

}  // namespace ntkuq
