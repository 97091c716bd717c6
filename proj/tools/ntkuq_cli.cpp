// ntkuq command-line front end.
//
//   ntkuq kernel build     --plan p.json --out kernel.bin
//   ntkuq infwidth predict --n-train 64 --method closed_form --out post.jsonl
//   ntkuq ensemble run     --n-train 64 --members 30 --output-dir out/
//   ntkuq sweep run        --plan p.json
//   ntkuq fit              --results out/results.csv --quantity eps_L
//   ntkuq emit-plot        --results out/results.csv --quantity eps_L
//
// Errors go to stderr as {"error": <code>, "message": <text>} with exit code 1.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ntkuq/ntkuq.hpp"

using namespace ntkuq;

namespace {

struct PlanFlags {
    std::string plan_path;
    std::optional<std::string> dataset_kind, generator, images, labels, events, output_dir;
    std::optional<Index> n_points, input_dim, n_out, test_size, validation_size, teacher_depth, teacher_width;
    std::optional<double> noise, energy_min, energy_max, lambda_b, lambda_W, eta, infinite_eta;
    std::optional<int> depth, width, members;
    std::optional<std::string> optimizer;
    std::optional<long> patience, max_epochs;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::vector<Index> sizes;
    std::vector<double> lambda_b_sweep;
    bool bayesian = false;
    bool finite = false;
    bool no_infinite = false;
};

void add_plan_flags(CLI::App *cmd, PlanFlags &f) {
    cmd->add_option("--plan", f.plan_path, "JSON plan file; flags below override it")->check(CLI::ExistingFile);
    cmd->add_option("--dataset", f.dataset_kind, "synthetic | idx | events");
    cmd->add_option("--generator", f.generator, "teacher_mlp | noisy_function");
    cmd->add_option("--n-points", f.n_points, "synthetic dataset size");
    cmd->add_option("--input-dim", f.input_dim, "synthetic input dimension");
    cmd->add_option("--n-out", f.n_out, "synthetic label dimension");
    cmd->add_option("--teacher-depth", f.teacher_depth);
    cmd->add_option("--teacher-width", f.teacher_width);
    cmd->add_option("--noise", f.noise, "label noise standard deviation");
    cmd->add_option("--images", f.images, "IDX image file");
    cmd->add_option("--labels", f.labels, "IDX label file");
    cmd->add_option("--events", f.events, "event-vector file");
    cmd->add_option("--energy-min", f.energy_min);
    cmd->add_option("--energy-max", f.energy_max);
    cmd->add_option("--test-size", f.test_size);
    cmd->add_option("--validation-size", f.validation_size);
    cmd->add_option("--depth", f.depth, "hidden layers + readout (L)");
    cmd->add_option("--width", f.width, "hidden width");
    cmd->add_option("--lambda-b", f.lambda_b);
    cmd->add_option("--lambda-w", f.lambda_W);
    cmd->add_option("--eta", f.eta, "finite-width learning rate");
    cmd->add_option("--infinite-eta", f.infinite_eta, "learning rate of the iterative infinite-width path");
    cmd->add_option("--optimizer", f.optimizer, "full_batch_gd | adam");
    cmd->add_option("--patience", f.patience, "early-stopping patience in epochs");
    cmd->add_option("--max-epochs", f.max_epochs);
    cmd->add_option("--members", f.members, "ensemble size");
    cmd->add_option("--sizes", f.sizes, "training-set sizes")->delimiter(',');
    cmd->add_option("--lambda-b-sweep", f.lambda_b_sweep, "lambda_b values for a sweep")->delimiter(',');
    cmd->add_flag("--bayesian", f.bayesian, "also compute the Bayesian posterior");
    cmd->add_flag("--finite", f.finite, "also train finite-width ensembles");
    cmd->add_flag("--no-infinite", f.no_infinite, "skip the infinite-width GD posterior");
    cmd->add_option("--output-dir", f.output_dir);
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--workers", f.workers, "worker threads (0 = hardware)");
}

template <class T, class U>
void apply(const std::optional<T> &v, U &dst) {
    if (v) { dst = static_cast<U>(*v); }
}

ExperimentPlan resolve_plan(const PlanFlags &f) {
    ExperimentPlan p = f.plan_path.empty() ? ExperimentPlan{} : load_plan(f.plan_path);
    apply(f.dataset_kind, p.dataset.kind);
    if (f.generator) { p.dataset.synthetic.kind = parse_synthetic_kind(*f.generator); }
    apply(f.n_points, p.dataset.synthetic.n_points);
    apply(f.input_dim, p.dataset.synthetic.input_dim);
    apply(f.n_out, p.dataset.synthetic.n_out);
    apply(f.teacher_depth, p.dataset.synthetic.teacher_depth);
    apply(f.teacher_width, p.dataset.synthetic.teacher_width);
    apply(f.noise, p.dataset.synthetic.noise);
    apply(f.images, p.dataset.images);
    apply(f.labels, p.dataset.labels);
    apply(f.events, p.dataset.events);
    apply(f.energy_min, p.dataset.energy_min);
    apply(f.energy_max, p.dataset.energy_max);
    apply(f.test_size, p.test_size);
    apply(f.validation_size, p.validation_size);
    apply(f.depth, p.arch.depth);
    apply(f.width, p.arch.width);
    apply(f.lambda_b, p.arch.lambda_b);
    apply(f.lambda_W, p.arch.lambda_W);
    if (f.eta) { p.train.eta = *f.eta; }
    if (f.infinite_eta) { p.infinite_eta = *f.infinite_eta; }
    if (f.optimizer) {
        require(*f.optimizer == "adam" || *f.optimizer == "full_batch_gd", ErrorCode::invalid_argument,
                "unknown optimizer '" + *f.optimizer + "'");
        p.train.optimizer = *f.optimizer == "adam" ? Optimizer::adam : Optimizer::full_batch_gd;
    }
    apply(f.patience, p.train.patience);
    apply(f.max_epochs, p.train.max_epochs);
    apply(f.members, p.ensemble_size);
    if (!f.sizes.empty()) { p.sizes = f.sizes; }
    if (!f.lambda_b_sweep.empty()) { p.lambda_b_sweep = f.lambda_b_sweep; }
    if (f.bayesian) { p.bayesian = true; }
    if (f.finite) { p.finite_width = true; }
    if (f.no_infinite) { p.infinite_width = false; }
    apply(f.output_dir, p.output_dir);
    apply(f.seed, p.master_seed);
    apply(f.workers, p.workers);
    return p;
}

Dataset load_checked(const ExperimentPlan &p) {
    Dataset ds = load_dataset(p.dataset, p.master_seed);
    ds.validate();
    return ds;
}

Matrix rows_of(const Matrix &m, const IndexList &ids) { return m(ids, Eigen::all); }

std::ofstream open_output(const std::string &path, std::ios::openmode mode = std::ios::out) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) { std::filesystem::create_directories(parent); }
    std::ofstream os(path, mode);
    require(static_cast<bool>(os), ErrorCode::io, "cannot open " + path);
    return os;
}

int kernel_build(const PlanFlags &f, std::optional<Index> count, const std::string &out) {
    const ExperimentPlan p = resolve_plan(f);
    const Dataset ds = load_checked(p);
    const Index n = count ? *count : ds.size();
    require(n >= 1 && n <= ds.size(), ErrorCode::invalid_argument, "--count exceeds the dataset");
    const KernelPair kp = build_kernel_pair(ds.inputs.subset(iota_ids(0, n)), p.arch, p.workers);
    auto os = open_output(out, std::ios::binary);
    write_kernel_binary(os, kp);
    std::cout << Json{{"points", n}, {"layer", kp.layer()}, {"file", out}}.dump() << '\n';
    return 0;
}

int infwidth_predict(const PlanFlags &f, Index n_train, const std::string &method, const std::string &out,
                     const std::string &cov_out) {
    const ExperimentPlan p = resolve_plan(f);
    const Dataset ds = load_checked(p);
    const SplitIds split = make_split(ds.size(), p.test_size, p.validation_size, p.master_seed);
    const IndexList train = split.train(n_train);
    IndexList joint = train;
    joint.insert(joint.end(), split.test.begin(), split.test.end());
    joint.insert(joint.end(), split.validation.begin(), split.validation.end());
    const KernelPair kp = build_kernel_pair(ds.inputs.subset(joint), p.arch, p.workers);
    const Index nt = static_cast<Index>(split.test.size());
    const IndexList ltrain = iota_ids(0, n_train);
    const IndexList ltest = iota_ids(n_train, n_train + nt);
    const Matrix y_train = rows_of(ds.labels, train);

    PredictivePosterior post;
    if (method == "closed_form") {
        post = closed_form_posterior(kp, ltrain, ltest, y_train);
    } else if (method == "bayesian") {
        post = bayesian_posterior(kp, ltrain, ltest, y_train);
    } else if (method == "iterative") {
        EarlyStopPolicy policy;
        policy.validation_ids = iota_ids(n_train + nt, kp.size());
        policy.validation_labels = rows_of(ds.labels, split.validation);
        policy.check_every = p.infinite_check_every;
        policy.patience = p.infinite_patience;
        policy.max_steps = p.infinite_max_steps;
        post = gd_evolve(kp, ltrain, ltest, y_train, p.infinite_eta, policy);
    } else {
        throw Error(ErrorCode::invalid_argument, "unknown method '" + method + "'");
    }
    post.test_ids = split.test;
    if (!out.empty()) {
        auto os = open_output(out);
        write_posterior_jsonl(os, post);
    }
    if (!cov_out.empty()) {
        auto os = open_output(cov_out, std::ios::binary);
        write_square_matrix(os, post.cov);
    }
    Json j = to_json(loss_stats(post, rows_of(ds.labels, split.test)));
    j["N_D"] = n_train;
    j["steps"] = post.steps_used;
    std::cout << j.dump() << '\n';
    return 0;
}

int ensemble_run(const PlanFlags &f, Index n_train) {
    const ExperimentPlan p = resolve_plan(f);
    const Dataset ds = load_checked(p);
    require(p.ensemble_size >= 2, ErrorCode::invalid_argument, "ensembles need >= 2 members");
    const SplitIds split = make_split(ds.size(), p.test_size, p.validation_size, p.master_seed);
    const IndexList train = split.train(n_train);
    DataSplit data;
    data.train = {rows_of(ds.inputs.points(), train), rows_of(ds.labels, train)};
    data.validation = {rows_of(ds.inputs.points(), split.validation), rows_of(ds.labels, split.validation)};
    data.test = {rows_of(ds.inputs.points(), split.test), rows_of(ds.labels, split.test)};
    EnsembleOptions opts;
    opts.n_members = p.ensemble_size;
    opts.base_seed = p.master_seed;
    opts.workers = p.workers;
    const EnsembleResult res = run_ensemble(data, p.arch, p.train, opts);

    std::filesystem::create_directories(p.output_dir);
    const std::string hash = config_hash(p);
    {
        std::ofstream os(p.output_dir + "/ensemble_members.jsonl", std::ios::app);
        require(static_cast<bool>(os), ErrorCode::io, "cannot write to " + p.output_dir);
        for (const auto &rec : res.records) {
            Json j = to_json(rec);
            j["N_D"] = n_train;
            j["width"] = p.arch.width;
            j["optimizer"] = to_string(p.train.optimizer);
            j["master_seed"] = p.master_seed;
            j["config_hash"] = hash;
            os << j.dump() << '\n';
        }
    }
    const std::string summary_path = p.output_dir + "/ensemble_summary.csv";
    const bool fresh = !std::filesystem::exists(summary_path);
    std::ofstream os(summary_path, std::ios::app);
    if (fresh) { os << "N_D,width,optimizer,mu_L,var_L,eps_L,n_ok,n_diverged\n"; }
    const auto &s = res.summary;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    os << n_train << ',' << p.arch.width << ',' << to_string(p.train.optimizer) << ',' << format_double(s.mu_L) << ','
       << format_double(s.var_L) << ',' << format_double(s.eps_L.value_or(nan)) << ',' << s.n_ok << ','
       << s.n_diverged << '\n';
    std::cout << Json{{"N_D", n_train},
                      {"mu_L", json_number(s.mu_L)},
                      {"var_L", json_number(s.var_L)},
                      {"eps_L", json_number(s.eps_L.value_or(nan))},
                      {"eps_se", json_number(s.eps_se.value_or(nan))},
                      {"n_ok", s.n_ok},
                      {"n_diverged", s.n_diverged}}
                     .dump()
              << '\n';
    return 0;
}

int sweep_run(const PlanFlags &f) {
    const ExperimentPlan p = resolve_plan(f);
    const PlanResult res = run_plan(p);
    Json j;
    j["config_hash"] = res.config_hash;
    j["rows"] = res.rows.size();
    j["failed"] = std::count_if(res.rows.begin(), res.rows.end(), [](const ResultRow &r) { return !r.ok(); });
    j["fits"] = Json::object();
    for (const auto &nf : res.fits) { j["fits"][nf.quantity] = to_json(nf.fit); }
    j["flatness"] = Json::object();
    for (const auto &[series, rep] : res.flatness) { j["flatness"][series] = to_json(rep); }
    j["files"] = res.files;
    std::cout << j.dump() << '\n';
    return 0;
}

int fit_cmd(const std::string &results, const std::string &quantity, const std::string &series, Index min_size,
            double threshold) {
    const auto rows = read_results_csv(results);
    const auto fits = fit_series(rows, min_size);
    write_fit_csv_header(std::cout);
    bool any = false;
    for (const auto &nf : fits) {
        const auto colon = nf.quantity.find(':');
        const std::string s = nf.quantity.substr(0, colon);
        const std::string q = nf.quantity.substr(colon + 1);
        if ((!series.empty() && s != series) || (!quantity.empty() && q != quantity)) { continue; }
        write_fit_csv_row(std::cout, nf.quantity, nf.fit);
        if (q == "eps_L") {
            Json j = to_json(epsilon_flatness_check(nf.fit, threshold));
            j["series"] = s;
            std::cerr << j.dump() << '\n';
        }
        any = true;
    }
    require(any, ErrorCode::invalid_argument, "no series with >= 3 usable sizes matched");
    return 0;
}

int emit_plot(const std::string &results, const std::string &quantity, const std::string &out) {
    const auto rows = emit_plot_data(read_results_csv(results), quantity);
    if (out.empty()) {
        write_plot_csv(std::cout, rows);
    } else {
        auto os = open_output(out);
        write_plot_csv(os, rows);
    }
    return 0;
}

void report_error(const std::string &code, const std::string &message) {
    std::cerr << Json{{"error", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"NTK loss-statistics toolkit"};
    app.require_subcommand(1);

    PlanFlags kernel_flags, infwidth_flags, ensemble_flags, sweep_flags;

    auto *kernel = app.add_subcommand("kernel", "kernel operations");
    kernel->require_subcommand(1);
    auto *kernel_build_cmd = kernel->add_subcommand("build", "export K and Theta for a dataset prefix");
    add_plan_flags(kernel_build_cmd, kernel_flags);
    std::optional<Index> kernel_count;
    std::string kernel_out;
    kernel_build_cmd->add_option("--count", kernel_count, "number of leading points (default: all)");
    kernel_build_cmd->add_option("--out", kernel_out, "binary output file")->required();

    auto *infwidth = app.add_subcommand("infwidth", "infinite-width predictions");
    infwidth->require_subcommand(1);
    auto *predict = infwidth->add_subcommand("predict", "posterior and loss statistics on the test split");
    add_plan_flags(predict, infwidth_flags);
    Index predict_n = 0;
    std::string predict_method = "closed_form", predict_out, predict_cov;
    predict->add_option("--n-train", predict_n, "training-set size")->required();
    predict->add_option("--method", predict_method, "closed_form | iterative | bayesian");
    predict->add_option("--out", predict_out, "posterior JSON-lines file");
    predict->add_option("--cov-out", predict_cov, "full covariance as a flat binary matrix");

    auto *ensemble = app.add_subcommand("ensemble", "finite-width ensembles");
    ensemble->require_subcommand(1);
    auto *ensemble_run_cmd = ensemble->add_subcommand("run", "train an ensemble with early stopping");
    add_plan_flags(ensemble_run_cmd, ensemble_flags);
    Index ensemble_n = 0;
    ensemble_run_cmd->add_option("--n-train", ensemble_n, "training-set size")->required();

    auto *sweep = app.add_subcommand("sweep", "experiment plans");
    sweep->require_subcommand(1);
    auto *sweep_run_cmd = sweep->add_subcommand("run", "run a plan and append to its result stores");
    add_plan_flags(sweep_run_cmd, sweep_flags);

    auto *fit = app.add_subcommand("fit", "power-law fits over a results store");
    std::string fit_results, fit_quantity, fit_series_name;
    Index fit_min = 0;
    double fit_threshold = 0.15;
    fit->add_option("--results", fit_results, "results.csv")->required()->check(CLI::ExistingFile);
    fit->add_option("--quantity", fit_quantity, "mu_L | sigma_L | eps_L (default: all)");
    fit->add_option("--series", fit_series_name, "infinite | bayesian | finite (default: all)");
    fit->add_option("--min-size", fit_min, "smallest N_D in the fit window");
    fit->add_option("--threshold", fit_threshold, "eps_L flatness threshold");

    auto *plot = app.add_subcommand("emit-plot", "tidy x,y,y_err,series CSV");
    std::string plot_results, plot_quantity, plot_out;
    plot->add_option("--results", plot_results, "results.csv")->required()->check(CLI::ExistingFile);
    plot->add_option("--quantity", plot_quantity, "mu_L | var_L | sigma_L | eps_L")->required();
    plot->add_option("--out", plot_out, "output file (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        report_error("usage", e.what());
        return 2;
    }

    try {
        if (*kernel_build_cmd) { return kernel_build(kernel_flags, kernel_count, kernel_out); }
        if (*predict) { return infwidth_predict(infwidth_flags, predict_n, predict_method, predict_out, predict_cov); }
        if (*ensemble_run_cmd) { return ensemble_run(ensemble_flags, ensemble_n); }
        if (*sweep_run_cmd) { return sweep_run(sweep_flags); }
        if (*fit) { return fit_cmd(fit_results, fit_quantity, fit_series_name, fit_min, fit_threshold); }
        if (*plot) { return emit_plot(plot_results, plot_quantity, plot_out); }
    } catch (const Error &e) {
        report_error(to_string(e.code()), e.what());
        return 1;
    } catch (const std::exception &e) {
        report_error("internal", e.what());
        return 1;
    }
    return 0;
}
