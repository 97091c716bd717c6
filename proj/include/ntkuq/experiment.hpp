#pragma once

// Experiment plans: training-set-size sweeps and lambda_b sweeps over one
// dataset, infinite-width (GD and Bayesian) and finite-width ensemble
// statistics per cell, append-only result stores, and scaling fits.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ntkuq/common.hpp"
#include "ntkuq/data.hpp"
#include "ntkuq/finite_width.hpp"
#include "ntkuq/infwidth.hpp"
#include "ntkuq/io.hpp"
#include "ntkuq/kernels.hpp"
#include "ntkuq/loss_stats.hpp"
#include "ntkuq/parallel.hpp"
#include "ntkuq/scaling.hpp"

namespace ntkuq {

struct DatasetRef {
    std::string kind = "synthetic";  // synthetic | idx | events
    SyntheticSpec synthetic;
    std::string images;
    std::string labels;
    std::string events;
    double energy_min = 10.0;
    double energy_max = 100.0;
};

struct ExperimentPlan {
    DatasetRef dataset;
    std::vector<Index> sizes{32, 64, 128, 256, 512, 1024};
    Index test_size = 256;
    Index validation_size = 64;
    ArchitectureConfig arch;
    TrainConfig train;
    int ensemble_size = 30;
    bool infinite_width = true;
    bool bayesian = false;
    bool finite_width = false;
    std::vector<double> lambda_b_sweep;  // non-empty: sweep lambda_b at N_D = sizes.back()
    std::optional<double> infinite_eta;  // GD step for the iterative path
    long infinite_check_every = 100;
    long infinite_patience = 10;
    long infinite_max_steps = 10'000'000;
    Index fit_min_size = 0;  // fit window: N_D >= fit_min_size
    double flatness_threshold = 0.15;
    std::string output_dir = "results";
    std::uint64_t master_seed = 0;
    unsigned workers = 1;

    bool sweep_mode() const { return !lambda_b_sweep.empty(); }
};

inline Json plan_to_json(const ExperimentPlan &p) {
    const auto &s = p.dataset.synthetic;
    Json j;
    j["dataset"] = {{"kind", p.dataset.kind},
                    {"synthetic",
                     {{"generator", to_string(s.kind)},
                      {"n_points", s.n_points},
                      {"input_dim", s.input_dim},
                      {"n_out", s.n_out},
                      {"teacher_depth", s.teacher_depth},
                      {"teacher_width", s.teacher_width},
                      {"weight_scale", s.weight_scale},
                      {"noise", s.noise}}},
                    {"images", p.dataset.images},
                    {"labels", p.dataset.labels},
                    {"events", p.dataset.events},
                    {"energy_min", p.dataset.energy_min},
                    {"energy_max", p.dataset.energy_max}};
    j["sizes"] = p.sizes;
    j["test_size"] = p.test_size;
    j["validation_size"] = p.validation_size;
    j["arch"] = {{"depth", p.arch.depth},
                 {"width", p.arch.width},
                 {"n_out", p.arch.n_out},
                 {"lambda_b", p.arch.lambda_b},
                 {"lambda_W", p.arch.lambda_W}};
    j["train"] = {{"eta", p.train.eta ? Json(*p.train.eta) : Json(nullptr)},
                  {"optimizer", to_string(p.train.optimizer)},
                  {"adam",
                   {{"beta1", p.train.adam.beta1},
                    {"beta2", p.train.adam.beta2},
                    {"eps", p.train.adam.eps},
                    {"minibatch", p.train.adam.minibatch}}},
                  {"patience", p.train.patience},
                  {"max_epochs", p.train.max_epochs}};
    j["ensemble_size"] = p.ensemble_size;
    j["infinite_width"] = p.infinite_width;
    j["bayesian"] = p.bayesian;
    j["finite_width"] = p.finite_width;
    j["lambda_b_sweep"] = p.lambda_b_sweep;
    j["infinite_eta"] = p.infinite_eta ? Json(*p.infinite_eta) : Json(nullptr);
    j["infinite_check_every"] = p.infinite_check_every;
    j["infinite_patience"] = p.infinite_patience;
    j["infinite_max_steps"] = p.infinite_max_steps;
    j["fit_min_size"] = p.fit_min_size;
    j["flatness_threshold"] = p.flatness_threshold;
    j["output_dir"] = p.output_dir;
    j["master_seed"] = p.master_seed;
    j["workers"] = p.workers;
    return j;
}

namespace detail {

template <class T>
void read_if(const Json &j, const char *key, T &out) {
    if (j.contains(key) && !j.at(key).is_null()) { out = j.at(key).get<T>(); }
}

inline void read_opt(const Json &j, const char *key, std::optional<double> &out) {
    if (j.contains(key)) { out = j.at(key).is_null() ? std::nullopt : std::optional<double>(j.at(key).get<double>()); }
}

}  // namespace detail

/// Missing keys keep their defaults.
inline ExperimentPlan plan_from_json(const Json &j) {
    ExperimentPlan p;
    try {
        if (j.contains("dataset")) {
            const Json &d = j.at("dataset");
            detail::read_if(d, "kind", p.dataset.kind);
            detail::read_if(d, "images", p.dataset.images);
            detail::read_if(d, "labels", p.dataset.labels);
            detail::read_if(d, "events", p.dataset.events);
            detail::read_if(d, "energy_min", p.dataset.energy_min);
            detail::read_if(d, "energy_max", p.dataset.energy_max);
            if (d.contains("synthetic")) {
                const Json &s = d.at("synthetic");
                auto &ss = p.dataset.synthetic;
                if (s.contains("generator")) { ss.kind = parse_synthetic_kind(s.at("generator").get<std::string>()); }
                detail::read_if(s, "n_points", ss.n_points);
                detail::read_if(s, "input_dim", ss.input_dim);
                detail::read_if(s, "n_out", ss.n_out);
                detail::read_if(s, "teacher_depth", ss.teacher_depth);
                detail::read_if(s, "teacher_width", ss.teacher_width);
                detail::read_if(s, "weight_scale", ss.weight_scale);
                detail::read_if(s, "noise", ss.noise);
            }
        }
        detail::read_if(j, "sizes", p.sizes);
        detail::read_if(j, "test_size", p.test_size);
        detail::read_if(j, "validation_size", p.validation_size);
        if (j.contains("arch")) {
            const Json &a = j.at("arch");
            detail::read_if(a, "depth", p.arch.depth);
            detail::read_if(a, "width", p.arch.width);
            detail::read_if(a, "n_out", p.arch.n_out);
            detail::read_if(a, "lambda_b", p.arch.lambda_b);
            detail::read_if(a, "lambda_W", p.arch.lambda_W);
        }
        if (j.contains("train")) {
            const Json &t = j.at("train");
            detail::read_opt(t, "eta", p.train.eta);
            if (t.contains("optimizer")) {
                const auto name = t.at("optimizer").get<std::string>();
                require(name == "adam" || name == "full_batch_gd" || name == "gd", ErrorCode::invalid_argument,
                        "unknown optimizer '" + name + "'");
                p.train.optimizer = name == "adam" ? Optimizer::adam : Optimizer::full_batch_gd;
            }
            if (t.contains("adam")) {
                const Json &a = t.at("adam");
                detail::read_if(a, "beta1", p.train.adam.beta1);
                detail::read_if(a, "beta2", p.train.adam.beta2);
                detail::read_if(a, "eps", p.train.adam.eps);
                detail::read_if(a, "minibatch", p.train.adam.minibatch);
            }
            detail::read_if(t, "patience", p.train.patience);
            detail::read_if(t, "max_epochs", p.train.max_epochs);
        }
        detail::read_if(j, "ensemble_size", p.ensemble_size);
        detail::read_if(j, "infinite_width", p.infinite_width);
        detail::read_if(j, "bayesian", p.bayesian);
        detail::read_if(j, "finite_width", p.finite_width);
        detail::read_if(j, "lambda_b_sweep", p.lambda_b_sweep);
        detail::read_opt(j, "infinite_eta", p.infinite_eta);
        detail::read_if(j, "infinite_check_every", p.infinite_check_every);
        detail::read_if(j, "infinite_patience", p.infinite_patience);
        detail::read_if(j, "infinite_max_steps", p.infinite_max_steps);
        detail::read_if(j, "fit_min_size", p.fit_min_size);
        detail::read_if(j, "flatness_threshold", p.flatness_threshold);
        detail::read_if(j, "output_dir", p.output_dir);
        detail::read_if(j, "master_seed", p.master_seed);
        detail::read_if(j, "workers", p.workers);
    } catch (const Json::exception &e) {
        throw Error(ErrorCode::format, std::string("malformed plan: ") + e.what());
    }
    return p;
}

inline ExperimentPlan load_plan(const std::string &path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open plan " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception &e) {
        throw Error(ErrorCode::format, std::string("plan is not valid JSON: ") + e.what());
    }
    return plan_from_json(j);
}

/// Hex FNV-1a of the canonical plan JSON, without output location or worker count.
inline std::string config_hash(const ExperimentPlan &p) {
    Json j = plan_to_json(p);
    j.erase("output_dir");
    j.erase("workers");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

inline Dataset load_dataset(const DatasetRef &ref, std::uint64_t master_seed) {
    if (ref.kind == "synthetic") { return make_synthetic(ref.synthetic, master_seed); }
    if (ref.kind == "idx") { return load_idx(ref.images, ref.labels); }
    if (ref.kind == "events") { return load_event_vectors(ref.events, ref.energy_min, ref.energy_max); }
    throw Error(ErrorCode::invalid_argument, "unknown dataset kind '" + ref.kind + "'");
}

/// Fixed test and validation sets and a nested training pool, from one
/// seeded permutation: the first N_D pool entries form the size-N_D training set.
struct SplitIds {
    IndexList test;
    IndexList validation;
    IndexList pool;

    IndexList train(Index n) const {
        require(n >= 1 && n <= static_cast<Index>(pool.size()), ErrorCode::invalid_argument,
                "training size " + std::to_string(n) + " exceeds the available pool");
        return IndexList(pool.begin(), pool.begin() + n);
    }
};

inline SplitIds make_split(Index dataset_size, Index test_size, Index validation_size, std::uint64_t seed) {
    require(test_size >= 1 && validation_size >= 0, ErrorCode::invalid_argument, "bad split sizes");
    require(test_size + validation_size < dataset_size, ErrorCode::invalid_argument,
            "test + validation sets leave no training data");
    IndexList perm = iota_ids(0, dataset_size);
    std::mt19937_64 rng(mix_seed(seed, 10));
    // Fisher-Yates with explicit modulo draws keeps the split identical across standard libraries.
    for (Index i = dataset_size - 1; i > 0; --i) {
        const auto j = static_cast<Index>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    SplitIds s;
    s.test.assign(perm.begin(), perm.begin() + test_size);
    s.validation.assign(perm.begin() + test_size, perm.begin() + test_size + validation_size);
    s.pool.assign(perm.begin() + test_size + validation_size, perm.end());
    return s;
}

inline void validate_plan(const ExperimentPlan &p, Index dataset_size) {
    p.arch.validate();
    require(!p.sizes.empty(), ErrorCode::invalid_argument, "plan needs at least one training-set size");
    require(std::is_sorted(p.sizes.begin(), p.sizes.end()) &&
                std::adjacent_find(p.sizes.begin(), p.sizes.end()) == p.sizes.end(),
            ErrorCode::invalid_argument, "sizes must be strictly ascending");
    require(p.sizes.front() >= 1, ErrorCode::invalid_argument, "sizes must be positive");
    require(p.sizes.back() + p.test_size + p.validation_size <= dataset_size, ErrorCode::invalid_argument,
            "train + validation + test sizes exceed the dataset");
    require(!p.finite_width || p.ensemble_size >= 2, ErrorCode::invalid_argument, "ensembles need >= 2 members");
    require(!p.finite_width || p.validation_size >= 1, ErrorCode::invalid_argument,
            "finite-width training needs a validation set for early stopping");
    for (double lb : p.lambda_b_sweep) {
        require(lb >= 0.0 && std::isfinite(lb), ErrorCode::invalid_argument, "lambda_b sweep values must be >= 0");
    }
}

/// One line of results.csv.
struct ResultRow {
    std::string series;  // infinite | bayesian | finite
    std::string dataset;
    std::string x_kind;  // N_D | lambda_b
    Index n_train = 0;
    double lambda_b = 0.0;
    int width = 0;  // 0 for infinite width
    std::string optimizer;
    std::string method;
    double eta = std::numeric_limits<double>::quiet_NaN();
    double mu_L = std::numeric_limits<double>::quiet_NaN();
    double var_L = std::numeric_limits<double>::quiet_NaN();
    double eps_L = std::numeric_limits<double>::quiet_NaN();
    double eps_se = std::numeric_limits<double>::quiet_NaN();
    long n_ok = 0;
    long n_diverged = 0;
    std::string status = "ok";
    std::uint64_t master_seed = 0;
    std::string config_hash;

    double x() const { return x_kind == "lambda_b" ? lambda_b : static_cast<double>(n_train); }
    bool ok() const { return status == "ok"; }
};

inline const char *kResultsHeader =
    "series,dataset,x_kind,N_D,lambda_b,width,optimizer,method,eta,mu_L,var_L,sigma_L,eps_L,eps_se,n_ok,n_diverged,"
    "status,master_seed,config_hash";

inline std::string to_csv(const ResultRow &r) {
    std::ostringstream os;
    os << r.series << ',' << r.dataset << ',' << r.x_kind << ',' << r.n_train << ',' << format_double(r.lambda_b) << ','
       << r.width << ',' << r.optimizer << ',' << r.method << ',' << format_double(r.eta) << ','
       << format_double(r.mu_L) << ',' << format_double(r.var_L) << ',' << format_double(std::sqrt(r.var_L)) << ','
       << format_double(r.eps_L) << ',' << format_double(r.eps_se) << ',' << r.n_ok << ',' << r.n_diverged << ','
       << r.status << ',' << r.master_seed << ',' << r.config_hash;
    return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string &line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, ',')) { out.push_back(cur); }
    if (!line.empty() && line.back() == ',') { out.emplace_back(); }
    return out;
}

inline double parse_double(const std::string &s) {
    if (s == "nan" || s == "-nan" || s.empty()) { return std::numeric_limits<double>::quiet_NaN(); }
    try {
        return std::stod(s);
    } catch (const std::exception &) {
        throw Error(ErrorCode::format, "not a number: '" + s + "'");
    }
}

}  // namespace detail

inline std::vector<ResultRow> read_results_csv(const std::string &path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open results file " + path);
    std::string line;
    std::vector<ResultRow> rows;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) { continue; }
        if (line.rfind("series,", 0) == 0) {
            header_seen = true;
            continue;
        }
        require(header_seen, ErrorCode::format, "results file lacks a header");
        const auto f = detail::split_csv_line(line);
        require(f.size() == 19, ErrorCode::format, "results row has " + std::to_string(f.size()) + " fields");
        ResultRow r;
        r.series = f[0];
        r.dataset = f[1];
        r.x_kind = f[2];
        r.n_train = std::stol(f[3]);
        r.lambda_b = detail::parse_double(f[4]);
        r.width = std::stoi(f[5]);
        r.optimizer = f[6];
        r.method = f[7];
        r.eta = detail::parse_double(f[8]);
        r.mu_L = detail::parse_double(f[9]);
        r.var_L = detail::parse_double(f[10]);
        r.eps_L = detail::parse_double(f[12]);
        r.eps_se = detail::parse_double(f[13]);
        r.n_ok = std::stol(f[14]);
        r.n_diverged = std::stol(f[15]);
        r.status = f[16];
        r.master_seed = std::stoull(f[17]);
        r.config_hash = f[18];
        rows.push_back(std::move(r));
    }
    return rows;
}

struct NamedFit {
    std::string quantity;  // e.g. infinite:eps_L
    ScalingFit fit;
};

struct PlanResult {
    std::vector<ResultRow> rows;
    std::vector<NamedFit> fits;
    std::map<std::string, FlatnessReport> flatness;  // by series
    std::string config_hash;
    std::vector<std::string> files;
};

namespace detail {

struct CellOutput {
    std::vector<ResultRow> rows;
    std::vector<Json> loss_records;
    std::vector<Json> member_records;
};

inline ResultRow base_row(const ExperimentPlan &plan, const Dataset &ds, const std::string &hash, Index n,
                          double lambda_b, const std::string &series) {
    ResultRow r;
    r.series = series;
    r.dataset = ds.name;
    r.x_kind = plan.sweep_mode() ? "lambda_b" : "N_D";
    r.n_train = n;
    r.lambda_b = lambda_b;
    r.master_seed = plan.master_seed;
    r.config_hash = hash;
    r.optimizer = "none";
    r.method = "none";
    return r;
}

inline void fill_stats(ResultRow &r, const LossStats &s) {
    r.mu_L = s.mu_L;
    r.var_L = s.var_L;
    r.eps_L = s.eps_L.value_or(std::numeric_limits<double>::quiet_NaN());
    r.method = s.method;
}

inline Matrix rows_of(const Matrix &m, const IndexList &ids) { return m(ids, Eigen::all); }

inline CellOutput run_cell(const ExperimentPlan &plan, const Dataset &ds, const SplitIds &split,
                           const std::string &hash, Index n, double lambda_b, unsigned inner_workers) {
    CellOutput out;
    ArchitectureConfig arch = plan.arch;
    arch.lambda_b = lambda_b;
    const IndexList train = split.train(n);
    const Matrix &y = ds.labels;

    auto record_loss = [&](const ResultRow &row, const LossStats &stats) {
        Json j = to_json(stats);
        j["series"] = row.series;
        j["N_D"] = n;
        j["lambda_b"] = lambda_b;
        j["master_seed"] = plan.master_seed;
        j["config_hash"] = hash;
        out.loss_records.push_back(std::move(j));
    };

    if (plan.infinite_width || plan.bayesian) {
        // Kernel over [train | test | validation]; local ids follow that order.
        IndexList joint = train;
        joint.insert(joint.end(), split.test.begin(), split.test.end());
        joint.insert(joint.end(), split.validation.begin(), split.validation.end());
        const Index nt = static_cast<Index>(split.test.size());
        const Index nv = static_cast<Index>(split.validation.size());
        const IndexList local_train = iota_ids(0, n);
        const IndexList local_test = iota_ids(n, n + nt);
        const IndexList local_val = iota_ids(n + nt, n + nt + nv);
        const Matrix y_train = rows_of(y, train);
        const Matrix y_test = rows_of(y, split.test);

        std::optional<KernelPair> kp;
        std::string kernel_status;
        try {
            kp.emplace(build_kernel_pair(ds.inputs.subset(joint), arch, inner_workers));
        } catch (const Error &e) {
            kernel_status = to_string(e.code());
        }

        if (plan.infinite_width) {
            ResultRow row = base_row(plan, ds, hash, n, lambda_b, "infinite");
            row.optimizer = "full_batch_gd";
            if (!kp) {
                row.status = kernel_status;
            } else {
                try {
                    PredictivePosterior post;
                    try {
                        post = closed_form_posterior(*kp, local_train, local_test, y_train);
                    } catch (const Error &e) {
                        if (e.code() != ErrorCode::ill_conditioned) { throw; }
                        EarlyStopPolicy policy;
                        policy.validation_ids = local_val;
                        policy.validation_labels = rows_of(y, split.validation);
                        policy.check_every = plan.infinite_check_every;
                        policy.patience = plan.infinite_patience;
                        policy.max_steps = plan.infinite_max_steps;
                        const double eta = plan.infinite_eta ? *plan.infinite_eta : default_gd_eta(*kp, local_train);
                        row.eta = eta;
                        post = gd_evolve(*kp, local_train, local_test, y_train, eta, policy);
                    }
                    const LossStats stats = loss_stats(post, y_test);
                    fill_stats(row, stats);
                    record_loss(row, stats);
                } catch (const Error &e) {
                    row.status = to_string(e.code());
                }
            }
            out.rows.push_back(row);
        }
        if (plan.bayesian) {
            ResultRow row = base_row(plan, ds, hash, n, lambda_b, "bayesian");
            if (!kp) {
                row.status = kernel_status;
            } else {
                try {
                    const auto post = bayesian_posterior(*kp, local_train, local_test, y_train);
                    const LossStats stats = loss_stats(post, y_test);
                    fill_stats(row, stats);
                    record_loss(row, stats);
                } catch (const Error &e) {
                    row.status = to_string(e.code());
                }
            }
            out.rows.push_back(row);
        }
    }

    if (plan.finite_width) {
        ResultRow row = base_row(plan, ds, hash, n, lambda_b, "finite");
        row.width = arch.width;
        row.optimizer = to_string(plan.train.optimizer);
        row.method = "ensemble";
        try {
            DataSplit data;
            data.train = {rows_of(ds.inputs.points(), train), rows_of(y, train)};
            data.validation = {rows_of(ds.inputs.points(), split.validation), rows_of(y, split.validation)};
            data.test = {rows_of(ds.inputs.points(), split.test), rows_of(y, split.test)};
            TrainConfig cfg = plan.train;
            double eta = resolve_eta(cfg, arch, data.train.x);
            if (plan.sweep_mode()) { eta = rescale_eta_for_bias(eta, lambda_b); }
            cfg.eta = eta;
            row.eta = eta;
            EnsembleOptions opts;
            opts.n_members = plan.ensemble_size;
            opts.base_seed = plan.master_seed;
            opts.workers = inner_workers;
            const EnsembleResult res = run_ensemble(data, arch, cfg, opts);
            for (const auto &rec : res.records) {
                Json j = to_json(rec);
                j["N_D"] = n;
                j["lambda_b"] = lambda_b;
                j["width"] = arch.width;
                j["optimizer"] = to_string(cfg.optimizer);
                j["master_seed"] = plan.master_seed;
                j["config_hash"] = hash;
                out.member_records.push_back(std::move(j));
            }
            const auto &s = res.summary;
            row.mu_L = s.mu_L;
            row.var_L = s.var_L;
            row.eps_L = s.eps_L.value_or(std::numeric_limits<double>::quiet_NaN());
            row.eps_se = s.eps_se.value_or(std::numeric_limits<double>::quiet_NaN());
            row.n_ok = s.n_ok;
            row.n_diverged = s.n_diverged;
            if (s.n_ok < 2) { row.status = "divergence"; }
        } catch (const Error &e) {
            row.status = to_string(e.code());
        }
        out.rows.push_back(row);
    }
    return out;
}

inline std::ofstream open_append(const std::string &path, const char *header, std::vector<std::string> &files) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream os(path, std::ios::app);
    require(static_cast<bool>(os), ErrorCode::io, "cannot open " + path + " for appending");
    if (fresh && header != nullptr) { os << header << '\n'; }
    files.push_back(path);
    return os;
}

}  // namespace detail

/// Fits mu_L, sigma_L and eps_L against N_D for every series with >= 3 usable rows.
inline std::vector<NamedFit> fit_series(const std::vector<ResultRow> &rows, Index min_size = 0) {
    std::map<std::string, std::vector<const ResultRow *>> by_series;
    for (const auto &r : rows) {
        if (r.ok() && r.x_kind == "N_D" && r.n_train >= min_size) { by_series[r.series].push_back(&r); }
    }
    std::vector<NamedFit> fits;
    for (const auto &[series, rs] : by_series) {
        const auto fit_of = [&](auto get) -> std::optional<ScalingFit> {
            std::vector<ScalingPoint> pts;
            for (const auto *r : rs) {
                const double v = get(*r);
                if (v > 0.0 && std::isfinite(v)) { pts.push_back({static_cast<double>(r->n_train), v}); }
            }
            if (pts.size() < 3) { return std::nullopt; }
            return fit_power_law(pts);
        };
        if (auto f = fit_of([](const ResultRow &r) { return r.mu_L; })) { fits.push_back({series + ":mu_L", *f}); }
        if (auto f = fit_of([](const ResultRow &r) { return std::sqrt(r.var_L); })) {
            fits.push_back({series + ":sigma_L", *f});
        }
        if (auto f = fit_of([](const ResultRow &r) { return r.eps_L; })) { fits.push_back({series + ":eps_L", *f}); }
    }
    return fits;
}

inline PlanResult run_plan(const ExperimentPlan &plan) {
    const Dataset ds = load_dataset(plan.dataset, plan.master_seed);
    ds.validate();
    validate_plan(plan, ds.size());
    const std::string hash = config_hash(plan);
    const SplitIds split = make_split(ds.size(), plan.test_size, plan.validation_size, plan.master_seed);

    struct Cell {
        Index n;
        double lambda_b;
    };
    std::vector<Cell> cells;
    if (plan.sweep_mode()) {
        for (double lb : plan.lambda_b_sweep) { cells.push_back({plan.sizes.back(), lb}); }
    } else {
        for (Index n : plan.sizes) { cells.push_back({n, plan.arch.lambda_b}); }
    }

    const unsigned outer = std::min<unsigned>(resolve_workers(plan.workers), static_cast<unsigned>(cells.size()));
    const unsigned inner = outer > 1 ? 1u : resolve_workers(plan.workers);
    std::vector<detail::CellOutput> outputs(cells.size());
    parallel_for(
        static_cast<Index>(cells.size()),
        [&](Index i) {
            const auto &c = cells[static_cast<std::size_t>(i)];
            outputs[static_cast<std::size_t>(i)] = detail::run_cell(plan, ds, split, hash, c.n, c.lambda_b, inner);
        },
        outer);

    PlanResult result;
    result.config_hash = hash;
    for (auto &o : outputs) {
        for (auto &r : o.rows) { result.rows.push_back(r); }
    }
    if (!plan.sweep_mode()) {
        result.fits = fit_series(result.rows, plan.fit_min_size);
        for (const auto &f : result.fits) {
            const auto pos = f.quantity.find(":eps_L");
            if (pos != std::string::npos) {
                result.flatness[f.quantity.substr(0, pos)] = epsilon_flatness_check(f.fit, plan.flatness_threshold);
            }
        }
    }

    std::filesystem::create_directories(plan.output_dir);
    const std::string dir = plan.output_dir + "/";
    {
        auto os = detail::open_append(dir + "results.csv", kResultsHeader, result.files);
        for (const auto &r : result.rows) { os << to_csv(r) << '\n'; }
    }
    {
        auto os = detail::open_append(dir + "loss_stats.jsonl", nullptr, result.files);
        for (const auto &o : outputs) {
            for (const auto &j : o.loss_records) { os << j.dump() << '\n'; }
        }
    }
    if (plan.finite_width) {
        auto members = detail::open_append(dir + "ensemble_members.jsonl", nullptr, result.files);
        for (const auto &o : outputs) {
            for (const auto &j : o.member_records) { members << j.dump() << '\n'; }
        }
        auto summary = detail::open_append(dir + "ensemble_summary.csv",
                                           "N_D,width,optimizer,mu_L,var_L,eps_L,n_ok,n_diverged", result.files);
        for (const auto &r : result.rows) {
            if (r.series != "finite") { continue; }
            summary << r.n_train << ',' << r.width << ',' << r.optimizer << ',' << format_double(r.mu_L) << ','
                    << format_double(r.var_L) << ',' << format_double(r.eps_L) << ',' << r.n_ok << ','
                    << r.n_diverged << '\n';
        }
    }
    if (!result.fits.empty()) {
        auto os = detail::open_append(dir + "fits.csv", "quantity,n_points,exponent,slope_sigma,intercept,r_squared",
                                      result.files);
        for (const auto &f : result.fits) { write_fit_csv_row(os, f.quantity, f.fit); }
    }
    if (!result.flatness.empty()) {
        auto os = detail::open_append(dir + "flatness.jsonl", nullptr, result.files);
        for (const auto &[series, rep] : result.flatness) {
            Json j = to_json(rep);
            j["series"] = series;
            j["config_hash"] = hash;
            os << j.dump() << '\n';
        }
    }
    return result;
}

struct PlotRow {
    double x = 0.0;
    double y = 0.0;
    double y_err = 0.0;
    std::string series;
};

/// Tidy (x, y, y_err, series) rows for one quantity, sorted by (series, x).
/// series is "<infinite|finite|bayesian>:<dataset>".
inline std::vector<PlotRow> emit_plot_data(const std::vector<ResultRow> &rows, const std::string &quantity) {
    require(quantity == "mu_L" || quantity == "var_L" || quantity == "sigma_L" || quantity == "eps_L",
            ErrorCode::invalid_argument, "unknown quantity '" + quantity + "' (mu_L, var_L, sigma_L, eps_L)");
    std::vector<PlotRow> out;
    for (const auto &r : rows) {
        if (!r.ok()) { continue; }
        PlotRow p;
        p.x = r.x();
        p.series = r.series + ":" + r.dataset;
        const bool finite = r.series == "finite";
        if (quantity == "mu_L") {
            p.y = r.mu_L;
            if (finite && r.n_ok > 0) { p.y_err = std::sqrt(r.var_L / static_cast<double>(r.n_ok)); }
        } else if (quantity == "var_L") {
            p.y = r.var_L;
        } else if (quantity == "sigma_L") {
            p.y = std::sqrt(r.var_L);
        } else {
            p.y = r.eps_L;
            if (finite && std::isfinite(r.eps_se)) { p.y_err = r.eps_se; }
        }
        out.push_back(std::move(p));
    }
    require(!out.empty(), ErrorCode::invalid_argument, "result store has no usable rows");
    std::stable_sort(out.begin(), out.end(), [](const PlotRow &a, const PlotRow &b) {
        return a.series != b.series ? a.series < b.series : a.x < b.x;
    });
    return out;
}

inline void write_plot_csv(std::ostream &os, const std::vector<PlotRow> &rows) {
    os << "x,y,y_err,series\n";
    for (const auto &r : rows) {
        os << format_double(r.x) << ',' << format_double(r.y) << ',' << format_double(r.y_err) << ',' << r.series << '\n';
    }
}

}  // namespace ntkuq
