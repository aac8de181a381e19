// Command-line driver: training runs, neuron tracing, dendritic-parameter
// grid search and data generation, all driven by a flat key = value config.
//
// Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "swm/agent.hpp"
#include "swm/env.hpp"
#include "swm/error.hpp"
#include "swm/io.hpp"
#include "swm/rng.hpp"
#include "swm/tasks.hpp"
#include "swm/world_model.hpp"

using namespace swm;

namespace {

// ---- config registry ---------------------------------------------------------

// every tunable key, its value kind and its default; unknown keys are rejected
// and all defaults are materialized into the saved resolved config
struct KeyDef {
    const char* key;
    char kind;  // i = integer, d = double, b = bool, s = string
    const char* def;
    const char* help;
};

const KeyDef kKeys[] = {
    {"seed", 'i', "1", "master seed; every draw is keyed off it"},
    {"out_dir", 's', "runs/out", "artifact directory (created if missing)"},
    {"threads", 'i', "1", "worker threads; determinism guaranteed only at 1"},

    {"neuron.tau", 'd', "2.0", "somatic decay"},
    {"neuron.tau_a", 'd', "2.0", "apical decay"},
    {"neuron.tau_b", 'd', "2.0", "basal decay"},
    {"neuron.g_b", 'd', "1.0", "basal conductance"},
    {"neuron.g_l", 'd', "1.0", "leak conductance"},
    {"neuron.beta", 'd', "1.0", "apical gate sharpness"},
    {"neuron.v_th", 'd', "1.0", "spike threshold"},
    {"neuron.v_reset", 'd', "0.0", "reset potential"},
    {"neuron.alpha", 'd', "2.0", "surrogate gradient width"},

    {"task.kind", 's', "delayed-recall", "delayed-recall | sequential-parity"},
    {"task.t", 'i', "20", "sequence length in ticks"},
    {"task.delay", 'i', "5", "gap between cue and trigger (delayed-recall)"},
    {"task.classes", 'i', "4", "number of classes"},
    {"task.channels", 'i', "5", "input channels"},
    {"task.jitter", 'd', "0.0", "per-cell noise spike probability"},
    {"task.seed", 'i', "0", "dataset seed (independent of the master seed)"},
    {"task.samples", 'i', "200", "dataset size"},

    {"cls.neuron", 's', "mcn", "sequence-classifier body: mcn | lif"},
    {"cls.hidden", 'i', "32", "gated body width; lif width is parameter-matched"},
    {"cls.window", 'i', "5", "readout averaging window (final ticks)"},
    {"cls.tau_ro", 'd', "2.0", "readout decay"},
    {"cls.gain", 'd', "6.0", "init gain; must push the body into the spiking regime"},
    {"cls.lr", 'd', "0.01", "classifier Adam learning rate"},
    {"cls.batch", 'i', "16", "classifier batch size"},

    {"train.epochs", 'i', "30", "training epochs; 0 emits the initial evaluation only"},

    {"env.name", 's', "pendulum", "pendulum | reacher (aliases *-lite accepted)"},
    {"env.max_steps", 'i', "200", "episode truncation length"},
    {"env.image", 'b', "false", "16x16 image observations (pendulum only)"},

    {"wm.groups", 'i', "8", "latent groups"},
    {"wm.classes", 'i', "8", "classes per latent group"},
    {"wm.kind", 's', "categorical", "latent kind: categorical | gaussian"},
    {"wm.min_std", 'd', "0.1", "gaussian latent stddev floor"},
    {"wm.enc_hidden", 'i', "32", "observation encoder width"},
    {"wm.fuse_hidden", 'i', "32", "(z, action) fusion width"},
    {"wm.size", 'i', "48", "recurrent backbone width"},
    {"wm.head_hidden", 'i', "32", "predictor head body width"},
    {"wm.ticks", 'i', "8", "backbone ticks per env step"},
    {"wm.head_ticks", 'i', "4", "head body ticks"},
    {"wm.trace_tau", 'd', "2.0", "leaky spike-trace decay feeding readouts"},
    {"wm.gain", 'd', "4.0", "world-model init gain; must push the backbone into the spiking regime"},
    {"wm.learnable_decay", 'b', "false", "reparameterized per-decay time constants"},
    {"wm.free_nats", 'd', "1.0", "KL free bits per latent group"},
    {"wm.dyn_scale", 'd', "0.5", "KL(sg(post) || prior) weight"},
    {"wm.rep_scale", 'd', "0.1", "KL(post || sg(prior)) weight"},
    {"wm.single_kl", 'b', "false", "single-KL ablation"},
    {"wm.reward_bins", 'i', "41", "two-hot reward bins"},
    {"wm.reward_lo", 'd', "-20.0", "reward bin range low (symlog units)"},
    {"wm.reward_hi", 'd', "20.0", "reward bin range high"},
    {"wm.conv1", 'i', "4", "image encoder channels, first stage"},
    {"wm.conv2", 'i', "8", "image encoder channels, second stage"},
    {"wm.lr", 'd', "3e-4", "world-model Adam learning rate"},
    {"wm.batch", 'i', "8", "replay sequences per train step"},
    {"wm.length", 'i', "16", "replay window length"},

    {"agent.on", 'b', "true", "off trains the world model alone on random-policy data"},
    {"agent.hidden", 'i', "48", "actor/critic body width"},
    {"agent.ticks", 'i', "4", "actor/critic body ticks"},
    {"agent.trace_tau", 'd', "2.0", "actor/critic spike-trace decay"},
    {"agent.gain", 'd', "2.0", "actor/critic init gain"},
    {"agent.min_std", 'd', "0.1", "policy stddev floor"},
    {"agent.eta", 'd', "3e-4", "entropy bonus weight"},
    {"agent.horizon", 'i', "15", "imagination horizon"},
    {"agent.gamma", 'd', "0.997", "discount"},
    {"agent.lambda", 'd', "0.95", "lambda-return mixing"},
    {"agent.retnorm", 'd', "0.99", "return-range EMA decay"},
    {"agent.imag_starts", 'i', "32", "imagination starts per train step"},
    {"agent.value_bins", 'i', "41", "two-hot value bins"},
    {"agent.value_lo", 'd', "-20.0", "value bin range low"},
    {"agent.value_hi", 'd', "20.0", "value bin range high"},
    {"agent.actor_lr", 'd', "3e-5", "actor Adam learning rate"},
    {"agent.critic_lr", 'd', "3e-5", "critic Adam learning rate"},

    {"run.steps", 'i', "50000", "total env steps to collect"},
    {"run.train_every", 'i', "16", "env steps between train steps"},
    {"run.warmup", 'i', "1000", "random-action env steps before training"},
    {"run.capacity", 'i', "100000", "replay capacity in rows"},
    {"run.eval_every", 'i', "2500", "env steps between greedy evaluations"},
    {"run.eval_episodes", 'i', "10", "episodes per evaluation"},
    {"run.resume", 's', "", "out_dir of a previous train-wm run to continue"},

    {"trace.source", 's', "env", "stimulus source: env | task"},
    {"trace.steps", 'i', "10", "env steps to trace (env source)"},
    {"trace.sample", 'i', "0", "dataset sample index (task source)"},
    {"trace.checkpoint", 's', "", "checkpoint to load; empty traces a fresh init"},

    {"grid.gb", 's', "0.5,1.0,1.5", "comma list of g_B/g_L ratios"},
    {"grid.beta", 's', "0.5,1.0,1.5", "comma list of gate sharpness values"},

    {"data.path", 's', "", "gen-data output path; default <out_dir>/data.spk"},
};

const KeyDef* find_key(const std::string& key) {
    for (const KeyDef& k : kKeys)
        if (key == k.key) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ParamError(key + ": expected a boolean, got \"" + v + "\"");
}

long long parse_int(const std::string& v, const std::string& key) {
    char* end = nullptr;
    errno = 0;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (errno != 0 || end == v.c_str() || *end != '\0')
        throw ParamError(key + ": expected an integer, got \"" + v + "\"");
    return x;
}

double parse_double(const std::string& v, const std::string& key) {
    char* end = nullptr;
    errno = 0;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0' || !std::isfinite(x))
        throw ParamError(key + ": expected a finite number, got \"" + v + "\"");
    return x;
}

// Flat dotted-namespace key set. Values are kept as text and checked against
// the registered kind on assignment, so every error names the offending key.
class RunConfig {
public:
    RunConfig() {
        for (const KeyDef& k : kKeys) vals_[k.key] = k.def;
    }

    void set(const std::string& key, const std::string& value) {
        const KeyDef* def = find_key(key);
        if (!def) throw ParamError("unknown config key: " + key);
        const std::string v = trim(value);
        switch (def->kind) {
            case 'i': parse_int(v, key); break;
            case 'd': parse_double(v, key); break;
            case 'b': parse_bool(v, key); break;
            default: break;
        }
        vals_[key] = v;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file: " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string s = trim(line);
            if (s.empty() || s[0] == '#') continue;
            const std::size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw ParamError(path + ":" + std::to_string(lineno) +
                                 ": expected key = value, got \"" + s + "\"");
            set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
        }
    }

    const std::string& get(const std::string& key) const {
        auto it = vals_.find(key);
        if (it == vals_.end()) throw ParamError("unknown config key: " + key);
        return it->second;
    }
    long long get_i(const std::string& key) const { return parse_int(get(key), key); }
    double get_d(const std::string& key) const { return parse_double(get(key), key); }
    bool get_b(const std::string& key) const { return parse_bool(get(key), key); }

    // sorted key = value dump; saving this with every run makes it self-describing
    std::string resolved() const {
        std::string out;
        for (const auto& [k, v] : vals_) {
            out += k;
            out += " = ";
            out += v;
            out += "\n";
        }
        return out;
    }

private:
    std::map<std::string, std::string> vals_;
};

// ---- argument parsing --------------------------------------------------------

const std::pair<const char*, const char*> kAliases[] = {
    {"neuron", "cls.neuron"}, {"task", "task.kind"},     {"delay", "task.delay"},
    {"epochs", "train.epochs"}, {"samples", "task.samples"}, {"env", "env.name"},
    {"steps", "run.steps"},   {"agent", "agent.on"},     {"seed", "seed"},
    {"threads", "threads"},   {"out", "out_dir"},        {"resume", "run.resume"},
};

std::string resolve_alias(const std::string& name) {
    for (const auto& [from, to] : kAliases)
        if (name == from) return to;
    return name;
}

// --config FILE loads immediately; --key=value and --key value apply in order,
// so later flags override earlier ones and the file they follow
void parse_args(RunConfig& cfg, int argc, char** argv, int first) {
    for (int i = first; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0)
            throw ParamError("expected --key=value or --key value, got \"" + arg + "\"");
        arg = arg.substr(2);
        std::string key, value;
        const std::size_t eq = arg.find('=');
        if (eq != std::string::npos) {
            key = arg.substr(0, eq);
            value = arg.substr(eq + 1);
        } else {
            key = arg;
            if (i + 1 >= argc || std::strncmp(argv[i + 1], "--", 2) == 0)
                throw ParamError("flag --" + key + " needs a value");
            value = argv[++i];
        }
        if (key == "config") {
            cfg.load_file(value);
            continue;
        }
        cfg.set(resolve_alias(key), value);
    }
}

// ---- small helpers -----------------------------------------------------------

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::uint64_t u64(long long v) { return static_cast<std::uint64_t>(v); }

Tensor as_row(const Tensor& flat) {
    Tensor r = flat;
    r.shape = Shape(1, flat.numel());
    return r;
}

Tensor from_row(const Tensor& row) {
    Tensor r = row;
    r.shape = Shape(row.numel());
    return r;
}

// sigmoid saturates to exactly 0 or 1 in double for large drives; reported
// gates stay in the open interval
double open_unit(double z) {
    if (z >= 1.0) return std::nextafter(1.0, 0.0);
    if (z <= 0.0) return std::nextafter(0.0, 1.0);
    return z;
}

constexpr std::uint64_t kInitSalt = 0x696e6974ULL;
constexpr std::uint64_t kEpisodeSalt = 0x65706973ULL;
constexpr std::uint64_t kStepSalt = 0x73746570ULL;
constexpr std::uint64_t kSampleSalt = 0x73616d70ULL;
constexpr std::uint64_t kTrainSalt = 0x7472616eULL;
constexpr std::uint64_t kAgentSalt = 0x6167656eULL;
constexpr std::uint64_t kEvalSalt = 0x6576616cULL;

// ---- config -> component builders ---------------------------------------------

NeuronParams neuron_from(const RunConfig& c) {
    NeuronParams p;
    p.tau = c.get_d("neuron.tau");
    p.tau_a = c.get_d("neuron.tau_a");
    p.tau_b = c.get_d("neuron.tau_b");
    p.g_B = c.get_d("neuron.g_b");
    p.g_L = c.get_d("neuron.g_l");
    p.beta = c.get_d("neuron.beta");
    p.v_th = c.get_d("neuron.v_th");
    p.v_reset = c.get_d("neuron.v_reset");
    p.alpha = c.get_d("neuron.alpha");
    return p;
}

TaskConfig task_from(const RunConfig& c) {
    TaskConfig t;
    t.kind = c.get("task.kind");
    t.T = static_cast<std::size_t>(c.get_i("task.t"));
    t.delay = static_cast<std::size_t>(c.get_i("task.delay"));
    t.n_classes = static_cast<std::size_t>(c.get_i("task.classes"));
    t.channels = static_cast<std::size_t>(c.get_i("task.channels"));
    t.jitter = c.get_d("task.jitter");
    t.seed = u64(c.get_i("task.seed"));
    return t;
}

ClassifierConfig cls_from(const RunConfig& c) {
    ClassifierConfig k;
    k.neuron = c.get("cls.neuron");
    k.hidden = static_cast<std::size_t>(c.get_i("cls.hidden"));
    k.readout_window = static_cast<std::size_t>(c.get_i("cls.window"));
    k.tau_ro = c.get_d("cls.tau_ro");
    k.params = neuron_from(c);
    k.init_gain = c.get_d("cls.gain");
    k.lr = c.get_d("cls.lr");
    k.batch = static_cast<std::size_t>(c.get_i("cls.batch"));
    k.seed = u64(c.get_i("seed"));
    return k;
}

WMConfig wm_from(const RunConfig& c, std::size_t obs_dim, std::size_t act_dim, bool image) {
    WMConfig w;
    w.obs_dim = obs_dim;
    w.act_dim = act_dim;
    w.latent.groups = static_cast<std::size_t>(c.get_i("wm.groups"));
    w.latent.classes = static_cast<std::size_t>(c.get_i("wm.classes"));
    w.latent_kind = c.get("wm.kind");
    w.latent_min_std = c.get_d("wm.min_std");
    w.enc_hidden = static_cast<std::size_t>(c.get_i("wm.enc_hidden"));
    w.fuse_hidden = static_cast<std::size_t>(c.get_i("wm.fuse_hidden"));
    w.mcn_size = static_cast<std::size_t>(c.get_i("wm.size"));
    w.head_hidden = static_cast<std::size_t>(c.get_i("wm.head_hidden"));
    w.ticks = static_cast<std::size_t>(c.get_i("wm.ticks"));
    w.head_ticks = static_cast<std::size_t>(c.get_i("wm.head_ticks"));
    w.trace_tau = c.get_d("wm.trace_tau");
    w.init_gain = c.get_d("wm.gain");
    w.neuron = neuron_from(c);
    w.learnable_decay = c.get_b("wm.learnable_decay");
    w.free_nats = c.get_d("wm.free_nats");
    w.dyn_scale = c.get_d("wm.dyn_scale");
    w.rep_scale = c.get_d("wm.rep_scale");
    w.single_kl = c.get_b("wm.single_kl");
    w.reward_bins = static_cast<int>(c.get_i("wm.reward_bins"));
    w.reward_lo = c.get_d("wm.reward_lo");
    w.reward_hi = c.get_d("wm.reward_hi");
    w.image_mode = image;
    w.conv_c1 = static_cast<std::size_t>(c.get_i("wm.conv1"));
    w.conv_c2 = static_cast<std::size_t>(c.get_i("wm.conv2"));
    return w;
}

AgentConfig agent_from(const RunConfig& c, std::size_t feat_dim, std::size_t act_dim) {
    AgentConfig a;
    a.feat_dim = feat_dim;
    a.act_dim = act_dim;
    a.discrete = false;
    a.hidden = static_cast<std::size_t>(c.get_i("agent.hidden"));
    a.ticks = static_cast<std::size_t>(c.get_i("agent.ticks"));
    a.trace_tau = c.get_d("agent.trace_tau");
    a.init_gain = c.get_d("agent.gain");
    a.neuron = neuron_from(c);
    a.min_std = c.get_d("agent.min_std");
    a.eta = c.get_d("agent.eta");
    a.horizon = static_cast<std::size_t>(c.get_i("agent.horizon"));
    a.gamma = c.get_d("agent.gamma");
    a.lambda = c.get_d("agent.lambda");
    a.retnorm_decay = c.get_d("agent.retnorm");
    a.imag_starts = static_cast<std::size_t>(c.get_i("agent.imag_starts"));
    a.value_bins = static_cast<int>(c.get_i("agent.value_bins"));
    a.value_lo = c.get_d("agent.value_lo");
    a.value_hi = c.get_d("agent.value_hi");
    a.actor_opt.lr = c.get_d("agent.actor_lr");
    a.critic_opt.lr = c.get_d("agent.critic_lr");
    return a;
}

std::string env_alias(const std::string& name) {
    if (name == "pendulum-lite") return "pendulum";
    if (name == "reacher-lite") return "reacher";
    return name;
}

std::unique_ptr<Env> env_from(const RunConfig& c) {
    return make_env(env_alias(c.get("env.name")),
                    static_cast<std::size_t>(c.get_i("env.max_steps")), c.get_b("env.image"));
}

// ---- shared sequence-training pipeline -----------------------------------------

struct SeqRun {
    SpikeDataset data;
    std::unique_ptr<SeqClassifier> model;
    TrainResult result;
};

// one dataset + classifier + full training run; train-seq and every grid cell
// go through here so a 1x1 grid is the same computation as train-seq
SeqRun run_seq_training(const RunConfig& cfg) {
    SeqRun r;
    r.data = gen_dataset(task_from(cfg), static_cast<std::size_t>(cfg.get_i("task.samples")));
    r.model = std::make_unique<SeqClassifier>(cls_from(cfg), r.data.channels, r.data.n_classes);
    const long long epochs = cfg.get_i("train.epochs");
    if (epochs < 1) throw ParamError("train.epochs: grid cells need at least 1 epoch");
    r.result = train_classifier(*r.model, r.data, static_cast<std::size_t>(epochs));
    return r;
}

void save_classifier(const std::string& path, const SeqClassifier& model, double epochs,
                     const std::string& resolved) {
    Checkpoint c;
    c.config_digest = digest_bytes(resolved);
    checkpoint_put_store(c, model.store());
    checkpoint_put_adam(c, "cls", const_cast<SeqClassifier&>(model).optimizer(), model.store());
    checkpoint_put_counter(c, "epochs", epochs);
    save_checkpoint(path, c);
}

// ---- train-seq -----------------------------------------------------------------

int cmd_train_seq(RunConfig& cfg) {
    const std::string out = cfg.get("out_dir");
    ensure_dir(out);
    const std::string resolved = cfg.resolved();
    write_text(out + "/config.txt", resolved);

    const long long epochs = cfg.get_i("train.epochs");
    if (epochs < 0) throw ParamError("train.epochs: must be >= 0");

    if (epochs == 0) {
        // initial evaluation only: untrained model on the same 80/20 split
        // training would use
        SpikeDataset data =
            gen_dataset(task_from(cfg), static_cast<std::size_t>(cfg.get_i("task.samples")));
        const std::size_t n = data.size();
        if (n < 5) throw ParamError("task.samples: need at least 5 samples for an 80/20 split");
        SeqClassifier model(cls_from(cfg), data.channels, data.n_classes);
        const std::size_t n_train = n * 4 / 5;
        std::vector<std::size_t> tr(n_train), te(n - n_train);
        for (std::size_t i = 0; i < n_train; ++i) tr[i] = i;
        for (std::size_t i = n_train; i < n; ++i) te[i - n_train] = i;
        const SeqClassifier::Eval etr = model.evaluate(data, tr);
        const SeqClassifier::Eval ete = model.evaluate(data, te);
        char row[128];
        std::string csv = "epoch,split,accuracy,loss\n";
        std::snprintf(row, sizeof row, "0,train,%.6f,%.6f\n", etr.accuracy, etr.loss);
        csv += row;
        std::snprintf(row, sizeof row, "0,test,%.6f,%.6f\n", ete.accuracy, ete.loss);
        csv += row;
        write_text(out + "/metrics.csv", csv);
        save_classifier(out + "/model.ckpt", model, 0.0, resolved);
        std::printf("initial evaluation: train acc %.4f loss %.4f | test acc %.4f loss %.4f\n",
                    etr.accuracy, etr.loss, ete.accuracy, ete.loss);
        std::printf("wrote %s/metrics.csv\n", out.c_str());
        return 0;
    }

    SeqRun run = run_seq_training(cfg);
    write_text(out + "/metrics.csv", curve_csv(run.result.curve));
    save_classifier(out + "/model.ckpt", *run.model, static_cast<double>(epochs), resolved);
    std::printf("%s body, %zu params, %zu samples\n", run.model->config().neuron.c_str(),
                run.model->param_count(), run.data.size());
    std::printf("final test accuracy %.4f loss %.4f\n", run.result.final_test_accuracy,
                run.result.final_test_loss);
    std::printf("wrote %s/metrics.csv\n", out.c_str());
    return 0;
}

// ---- grid-search ---------------------------------------------------------------

std::vector<double> parse_list(const std::string& text, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string v = trim(item);
        if (v.empty()) continue;
        out.push_back(parse_double(v, key));
    }
    if (out.empty()) throw ParamError(key + ": empty grid axis");
    return out;
}

int cmd_grid_search(RunConfig& cfg) {
    const std::string out = cfg.get("out_dir");
    ensure_dir(out);
    write_text(out + "/config.txt", cfg.resolved());

    std::vector<double> gbs = parse_list(cfg.get("grid.gb"), "grid.gb");
    std::vector<double> betas = parse_list(cfg.get("grid.beta"), "grid.beta");
    std::sort(gbs.begin(), gbs.end());
    std::sort(betas.begin(), betas.end());
    const double g_l = cfg.get_d("neuron.g_l");

    struct Cell {
        double gb_ratio, beta;
        double acc = std::nan(""), loss = std::nan("");
        std::string error;
    };
    std::vector<Cell> cells;
    for (double gb : gbs)
        for (double beta : betas) cells.push_back({gb, beta, 0, 0, ""});

    // cells are independent and identically seeded, so execution order does
    // not change the results; failures become NaN rows and the run continues
    auto run_cell = [&](Cell& cell) {
        try {
            RunConfig local = cfg;
            local.set("neuron.g_b", fmt(cell.gb_ratio * g_l));
            local.set("neuron.beta", fmt(cell.beta));
            SeqRun r = run_seq_training(local);
            cell.acc = r.result.final_test_accuracy;
            cell.loss = r.result.final_test_loss;
        } catch (const std::exception& e) {
            cell.acc = std::nan("");
            cell.loss = std::nan("");
            cell.error = e.what();
        }
    };

    const long long threads = std::max<long long>(1, cfg.get_i("threads"));
    if (threads == 1 || cells.size() == 1) {
        for (Cell& c : cells) run_cell(c);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
                run_cell(cells[i]);
        };
        std::vector<std::thread> pool;
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(threads), cells.size());
        for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    std::string csv = "gb_over_gl,beta,final_accuracy,final_loss\n";
    for (const Cell& c : cells) {
        csv += fmt(c.gb_ratio);
        csv += ",";
        csv += fmt(c.beta);
        csv += ",";
        csv += std::isnan(c.acc) ? "nan" : fmt(c.acc);
        csv += ",";
        csv += std::isnan(c.loss) ? "nan" : fmt(c.loss);
        csv += "\n";
        std::printf("gb/gl %-5s beta %-5s -> ", fmt(c.gb_ratio).c_str(), fmt(c.beta).c_str());
        if (c.error.empty())
            std::printf("accuracy %.4f loss %.4f\n", c.acc, c.loss);
        else
            std::printf("failed: %s\n", c.error.c_str());
    }
    write_text(out + "/grid.csv", csv);
    std::printf("wrote %s/grid.csv\n", out.c_str());
    return 0;
}

// ---- gen-data ------------------------------------------------------------------

int cmd_gen_data(RunConfig& cfg) {
    const std::string out = cfg.get("out_dir");
    ensure_dir(out);
    write_text(out + "/config.txt", cfg.resolved());

    const long long n = cfg.get_i("task.samples");
    if (n < 0) throw ParamError("task.samples: must be >= 0");
    SpikeDataset data = gen_dataset(task_from(cfg), static_cast<std::size_t>(n));
    std::string path = cfg.get("data.path");
    if (path.empty()) path = out + "/data.spk";
    save_spikes(path, data);

    std::printf("samples = %zu\n", data.size());
    std::vector<std::size_t> hist(data.n_classes, 0);
    for (const SpikeSequenceSample& s : data.samples) ++hist[s.label];
    for (std::size_t k = 0; k < hist.size(); ++k)
        std::printf("class %zu = %zu\n", k, hist[k]);
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

// ---- train-wm ------------------------------------------------------------------

// mean return of `episodes` greedy rollouts on a fresh env instance; the
// collection env's in-flight episode is never touched
double run_greedy_eval(const RunConfig& cfg, const WorldModel& wm, const Agent* agent,
                       std::uint64_t seed, long long eval_idx) {
    auto env = env_from(cfg);
    const EnvSpec& sp = env->spec();
    const long long episodes = cfg.get_i("run.eval_episodes");
    double total = 0.0;
    for (long long ep = 0; ep < episodes; ++ep) {
        Rng rng(hash_u64(seed, kEvalSalt, u64(eval_idx), u64(ep)));
        Tensor obs = env->reset(hash_u64(seed, kEvalSalt, u64(eval_idx * 1000 + ep)));
        WorldModelState ws = wm.initial_state(1);
        Tensor a_prev = Tensor::zeros(Shape(1, sp.act_dim));
        for (;;) {
            ws = wm.observe_step(ws, a_prev, as_row(obs), rng).state;
            Tensor act;
            if (agent) {
                act = agent->actor().act(ws.feat, false, rng).action;
            } else {
                act = Tensor{Shape(1, sp.act_dim)};
                for (std::size_t j = 0; j < sp.act_dim; ++j) act(0, j) = rng.uniform(-1.0, 1.0);
            }
            const StepResult sr = env->step(from_row(act));
            total += sr.reward;
            a_prev = act;
            obs = sr.obs;
            if (sr.cont == 0.0) break;
        }
    }
    return total / static_cast<double>(episodes);
}

int cmd_train_wm(RunConfig& cfg) {
    const std::string out = cfg.get("out_dir");
    ensure_dir(out);
    const std::string resolved = cfg.resolved();
    write_text(out + "/config.txt", resolved);

    const std::uint64_t seed = u64(cfg.get_i("seed"));
    auto env = env_from(cfg);
    const EnvSpec& sp = env->spec();

    WMConfig wc = wm_from(cfg, sp.obs_dim, sp.act_dim, cfg.get_b("env.image"));
    ParamStore wstore;
    Rng init_rng(hash_u64(seed, kInitSalt));
    WorldModel wm(wc, wstore, init_rng);
    Adam wopt(AdamConfig{.lr = cfg.get_d("wm.lr")});

    const bool use_agent = cfg.get_b("agent.on");
    std::optional<Agent> agent;
    if (use_agent) agent.emplace(agent_from(cfg, wc.feat_dim(), sp.act_dim), init_rng);

    ReplayBuffer buf(static_cast<std::size_t>(cfg.get_i("run.capacity")));
    long long step = 0, episode = 0, evals = 0;

    const std::string resume = cfg.get("run.resume");
    if (!resume.empty()) {
        Checkpoint cw = load_checkpoint(resume + "/wm.ckpt");
        checkpoint_get_store(cw, wstore);
        checkpoint_get_adam(cw, "wm", wopt, wstore);
        step = static_cast<long long>(checkpoint_get_counter(cw, "step"));
        episode = static_cast<long long>(checkpoint_get_counter(cw, "episode"));
        evals = static_cast<long long>(checkpoint_get_counter(cw, "evals"));
        if (use_agent) {
            Checkpoint ca = load_checkpoint(resume + "/actor.ckpt");
            checkpoint_get_store(ca, agent->actor().store());
            checkpoint_get_adam(ca, "actor", agent->actor_opt(), agent->actor().store());
            agent->set_retnorm_ema(checkpoint_get_counter(ca, "retnorm"));
            Checkpoint cc = load_checkpoint(resume + "/critic.ckpt");
            checkpoint_get_store(cc, agent->critic().store());
            checkpoint_get_adam(cc, "critic", agent->critic_opt(), agent->critic().store());
        }
        for (Trajectory& ep : load_episodes(resume + "/buffer.swe")) buf.add(std::move(ep));
        std::printf("resumed at step %lld (%zu replay rows)\n", step, buf.rows());
    }

    const long long total = cfg.get_i("run.steps");
    const long long train_every = std::max<long long>(1, cfg.get_i("run.train_every"));
    const long long warmup = cfg.get_i("run.warmup");
    const long long eval_every = cfg.get_i("run.eval_every");
    const std::size_t B = static_cast<std::size_t>(cfg.get_i("wm.batch"));
    const std::size_t L = static_cast<std::size_t>(cfg.get_i("wm.length"));

    std::string csv =
        "step,loss,pred_obs,pred_reward,pred_continue,dyn_kl,rep_kl,grad_norm,"
        "actor_loss,critic_loss,entropy,imag_return,value_mean,adv_scale,eval_return\n";
    double last_eval = std::nan("");

    Tensor obs = env->reset(hash_u64(seed, kEpisodeSalt, u64(episode)));
    Trajectory traj = Trajectory::begin(obs, sp.act_dim);
    WorldModelState ws = wm.initial_state(1);
    Tensor a_prev = Tensor::zeros(Shape(1, sp.act_dim));

    // a window is sampleable once some episode has at least L rows
    auto can_sample = [&] {
        for (std::size_t i = 0; i < buf.episodes(); ++i)
            if (buf.episode(i).rows() >= L) return true;
        return false;
    };

    while (step < total) {
        ++step;
        Rng srng(hash_u64(seed, kStepSalt, u64(step)));
        Tensor act{Shape(1, sp.act_dim)};
        if (use_agent && step > warmup) {
            ws = wm.observe_step(ws, a_prev, as_row(obs), srng).state;
            act = agent->actor().act(ws.feat, true, srng).action;
        } else {
            for (std::size_t j = 0; j < sp.act_dim; ++j) act(0, j) = srng.uniform(-1.0, 1.0);
        }
        const StepResult sr = env->step(from_row(act));
        traj.push(from_row(act), sr);
        a_prev = act;
        obs = sr.obs;
        if (sr.cont == 0.0) {
            buf.add(std::move(traj));
            ++episode;
            obs = env->reset(hash_u64(seed, kEpisodeSalt, u64(episode)));
            traj = Trajectory::begin(obs, sp.act_dim);
            ws = wm.initial_state(1);
            a_prev = Tensor::zeros(Shape(1, sp.act_dim));
        }

        if (step > warmup && step % train_every == 0 && can_sample()) {
            const WMBatch batch = buf.sample(B, L, hash_u64(seed, kSampleSalt, u64(step)));
            Rng trng(hash_u64(seed, kTrainSalt, u64(step)));
            const std::map<std::string, double> m = wm.train_step(wstore, wopt, batch, trng);
            std::map<std::string, double> am;
            if (use_agent) {
                Rng arng(hash_u64(seed, kAgentSalt, u64(step)));
                am = agent->train_step(wm, batch, arng);
            }
            auto pick = [](const std::map<std::string, double>& mm, const char* k) {
                auto it = mm.find(k);
                return it == mm.end() ? std::nan("") : it->second;
            };
            csv += std::to_string(step);
            for (const char* k : {"loss", "pred_obs", "pred_reward", "pred_continue", "dyn_kl",
                                  "rep_kl", "grad_norm"})
                csv += "," + fmt(pick(m, k));
            for (const char* k : {"actor_loss", "critic_loss", "entropy", "imag_return",
                                  "value_mean", "adv_scale"})
                csv += "," + fmt(pick(am, k));
            csv += "," + fmt(last_eval) + "\n";
        }

        if (eval_every > 0 && step % eval_every == 0) {
            ++evals;
            last_eval = run_greedy_eval(cfg, wm, use_agent ? &*agent : nullptr, seed, evals);
            std::printf("step %lld  eval_return %.3f\n", step, last_eval);
            std::fflush(stdout);
        }
    }

    write_text(out + "/metrics.csv", csv);

    Checkpoint cw;
    cw.config_digest = digest_bytes(resolved);
    checkpoint_put_store(cw, wstore);
    checkpoint_put_adam(cw, "wm", wopt, wstore);
    checkpoint_put_counter(cw, "step", static_cast<double>(step));
    checkpoint_put_counter(cw, "episode", static_cast<double>(episode));
    checkpoint_put_counter(cw, "evals", static_cast<double>(evals));
    save_checkpoint(out + "/wm.ckpt", cw);
    if (use_agent) {
        Checkpoint ca;
        ca.config_digest = cw.config_digest;
        checkpoint_put_store(ca, agent->actor().store());
        checkpoint_put_adam(ca, "actor", agent->actor_opt(), agent->actor().store());
        checkpoint_put_counter(ca, "retnorm", agent->retnorm_ema());
        save_checkpoint(out + "/actor.ckpt", ca);
        Checkpoint cc;
        cc.config_digest = cw.config_digest;
        checkpoint_put_store(cc, agent->critic().store());
        checkpoint_put_adam(cc, "critic", agent->critic_opt(), agent->critic().store());
        save_checkpoint(out + "/critic.ckpt", cc);
    }
    std::vector<Trajectory> eps;
    eps.reserve(buf.episodes());
    for (std::size_t i = 0; i < buf.episodes(); ++i) eps.push_back(buf.episode(i));
    save_episodes(out + "/buffer.swe", eps);

    std::printf("done: %lld steps, %lld episodes", step, episode);
    if (!std::isnan(last_eval)) std::printf(", last eval_return %.3f", last_eval);
    std::printf("\nwrote %s/metrics.csv\n", out.c_str());
    return 0;
}

// ---- trace ---------------------------------------------------------------------

struct TraceRows {
    std::size_t neurons = 0;
    // row-major per tick: [tick][neuron]
    std::vector<std::vector<double>> v_a, v_b, u, z, s;
};

std::string trace_csv(const TraceRows& tr) {
    std::string csv = "tick,neuron,v_apical,v_basal,u,z,spike\n";
    char buf[200];
    for (std::size_t t = 0; t < tr.v_a.size(); ++t)
        for (std::size_t n = 0; n < tr.neurons; ++n) {
            std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.17g,%d\n", t, n,
                          tr.v_a[t][n], tr.v_b[t][n], tr.u[t][n], open_unit(tr.z[t][n]),
                          tr.s[t][n] != 0.0 ? 1 : 0);
            csv += buf;
        }
    return csv;
}

std::string trace_summary(const TraceRows& tr, const std::string& source) {
    const std::size_t T = tr.v_a.size(), N = tr.neurons;
    std::vector<double> rate(N, 0.0), duty(N, 0.0);
    std::vector<double> pop_rate(T, 0.0), mean_z(T, 0.0);
    double rate_all = 0.0, z_all = 0.0, duty_all = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t n = 0; n < N; ++n) {
            const double s = tr.s[t][n] != 0.0 ? 1.0 : 0.0;
            const double z = tr.z[t][n];
            rate[n] += s;
            duty[n] += z > 0.5 ? 1.0 : 0.0;
            pop_rate[t] += s;
            mean_z[t] += z;
        }
        pop_rate[t] /= static_cast<double>(N);
        mean_z[t] /= static_cast<double>(N);
    }
    for (std::size_t n = 0; n < N; ++n) {
        rate[n] /= static_cast<double>(T);
        duty[n] /= static_cast<double>(T);
        rate_all += rate[n];
        duty_all += duty[n];
    }
    rate_all /= static_cast<double>(N);
    duty_all /= static_cast<double>(N);
    for (std::size_t t = 0; t < T; ++t) z_all += mean_z[t];
    z_all /= static_cast<double>(T);

    // Pearson correlation across ticks between the population firing rate and
    // the mean apical gate
    double mr = 0.0, mz = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        mr += pop_rate[t];
        mz += mean_z[t];
    }
    mr /= static_cast<double>(T);
    mz /= static_cast<double>(T);
    double cov = 0.0, vr = 0.0, vz = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        cov += (pop_rate[t] - mr) * (mean_z[t] - mz);
        vr += (pop_rate[t] - mr) * (pop_rate[t] - mr);
        vz += (mean_z[t] - mz) * (mean_z[t] - mz);
    }
    const double corr = (vr > 0.0 && vz > 0.0) ? cov / std::sqrt(vr * vz) : std::nan("");

    std::string s;
    s += "source = " + source + "\n";
    s += "ticks = " + std::to_string(T) + "\n";
    s += "neurons = " + std::to_string(N) + "\n";
    s += "firing_rate.mean = " + fmt(rate_all) + "\n";
    s += "gate.mean = " + fmt(z_all) + "\n";
    s += "gate_duty.mean = " + fmt(duty_all) + "\n";
    s += "gate_rate_correlation = " + fmt(corr) + "\n";
    for (std::size_t n = 0; n < N; ++n)
        s += "firing_rate.neuron." + std::to_string(n) + " = " + fmt(rate[n]) + "\n";
    for (std::size_t n = 0; n < N; ++n)
        s += "gate_duty.neuron." + std::to_string(n) + " = " + fmt(duty[n]) + "\n";
    return s;
}

void append_tick(TraceRows& tr, const Tensor& v_a, const Tensor& v_b, const Tensor& u,
                 const Tensor& z, const Tensor& s) {
    const std::size_t N = tr.neurons;
    auto row = [N](const Tensor& x) {
        return std::vector<double>(x.data.begin(), x.data.begin() + static_cast<long>(N));
    };
    tr.v_a.push_back(row(v_a));
    tr.v_b.push_back(row(v_b));
    tr.u.push_back(row(u));
    tr.z.push_back(row(z));
    tr.s.push_back(row(s));
}

int cmd_trace(RunConfig& cfg) {
    const std::string out = cfg.get("out_dir");
    ensure_dir(out);
    write_text(out + "/config.txt", cfg.resolved());

    const std::string source = cfg.get("trace.source");
    const std::string ckpt = cfg.get("trace.checkpoint");
    const std::uint64_t seed = u64(cfg.get_i("seed"));
    TraceRows tr;

    if (source == "env") {
        auto env = env_from(cfg);
        const EnvSpec& sp = env->spec();
        WMConfig wc = wm_from(cfg, sp.obs_dim, sp.act_dim, cfg.get_b("env.image"));
        ParamStore store;
        Rng init_rng(hash_u64(seed, kInitSalt));
        WorldModel wm(wc, store, init_rng);
        if (!ckpt.empty()) checkpoint_get_store(load_checkpoint(ckpt), store);

        const long long steps = cfg.get_i("trace.steps");
        if (steps < 1) throw ParamError("trace.steps: must be >= 1");
        tr.neurons = wc.mcn_size;
        Tensor obs = env->reset(hash_u64(seed, kEpisodeSalt, 0));
        WorldModelState ws = wm.initial_state(1);
        Tensor a_prev = Tensor::zeros(Shape(1, sp.act_dim));
        for (long long s = 0; s < steps; ++s) {
            Rng srng(hash_u64(seed, kStepSalt, u64(s)));
            std::vector<WorldModel::TickTrace> ticks;
            ws = wm.observe_step_traced(ws, a_prev, as_row(obs), srng, ticks).state;
            for (const WorldModel::TickTrace& tk : ticks)
                append_tick(tr, tk.v_apical, tk.v_basal, tk.u, tk.z_gate, tk.spike);
            Tensor act{Shape(1, sp.act_dim)};
            for (std::size_t j = 0; j < sp.act_dim; ++j) act(0, j) = srng.uniform(-1.0, 1.0);
            const StepResult sr = env->step(from_row(act));
            a_prev = act;
            obs = sr.obs;
            if (sr.cont == 0.0) {
                obs = env->reset(hash_u64(seed, kEpisodeSalt, u64(s) + 1));
                ws = wm.initial_state(1);
                a_prev = Tensor::zeros(Shape(1, sp.act_dim));
            }
        }
    } else if (source == "task") {
        if (cfg.get("cls.neuron") != "mcn")
            throw ParamError("cls.neuron: tracing dendritic state needs the mcn body");
        SpikeDataset data =
            gen_dataset(task_from(cfg), static_cast<std::size_t>(cfg.get_i("task.samples")));
        SeqClassifier model(cls_from(cfg), data.channels, data.n_classes);
        if (!ckpt.empty()) checkpoint_get_store(load_checkpoint(ckpt), model.store());
        const long long sample = cfg.get_i("trace.sample");
        if (sample < 0 || static_cast<std::size_t>(sample) >= data.size())
            throw ParamError("trace.sample: index out of range");
        tr.neurons = model.config().hidden;
        for (const SeqClassifier::TickTrace& tk :
             model.trace_sample(data, static_cast<std::size_t>(sample)))
            append_tick(tr, tk.v_apical, tk.v_basal, tk.u, tk.z_gate, tk.spike);
    } else {
        throw ParamError("trace.source: expected env or task, got \"" + source + "\"");
    }

    write_text(out + "/trace.csv", trace_csv(tr));
    write_text(out + "/summary.txt", trace_summary(tr, source));
    std::printf("traced %zu ticks x %zu neurons\n", tr.v_a.size(), tr.neurons);
    std::printf("wrote %s/trace.csv and %s/summary.txt\n", out.c_str(), out.c_str());
    return 0;
}

// ---- entry ---------------------------------------------------------------------

void print_usage() {
    std::printf(
        "usage: swm <command> [--key=value ...]\n"
        "\n"
        "commands:\n"
        "  train-seq    train a spiking sequence classifier; writes metrics.csv,\n"
        "               model.ckpt and the resolved config\n"
        "  train-wm     collect env steps and train the world model (and, unless\n"
        "               --agent off, the imagination actor-critic)\n"
        "  trace        record per-tick dendritic state (v_apical, v_basal, u, z,\n"
        "               spike) from an env rollout or a task sample\n"
        "  grid-search  train one cell per (g_B/g_L, beta) pair; writes grid.csv\n"
        "  gen-data     write a spike dataset and print its class histogram\n"
        "  keys         list every config key with its default and meaning\n"
        "\n"
        "config: flat key = value file via --config FILE, overridden left to right\n"
        "by --key=value or --key value flags. Shorthand: --neuron --task --delay\n"
        "--epochs --samples --env --steps --agent --seed --threads --out --resume.\n"
        "Every run saves its fully resolved config next to its artifacts.\n"
        "\n"
        "exit codes: 0 ok, 1 config error, 2 numeric failure, 3 I/O error\n");
}

int cmd_keys() {
    for (const KeyDef& k : kKeys)
        std::printf("%-20s %-12s %s\n", k.key, k.def[0] ? k.def : "\"\"", k.help);
    return 0;
}

int dispatch(int argc, char** argv) {
    if (argc < 2) {
        print_usage();
        return 1;
    }
    const std::string cmd = argv[1];
    if (cmd == "help" || cmd == "--help" || cmd == "-h") {
        print_usage();
        return 0;
    }
    if (cmd == "keys") return cmd_keys();

    RunConfig cfg;
    parse_args(cfg, argc, argv, 2);
    if (cfg.get_i("threads") < 1) throw ParamError("threads: must be >= 1");
    if (cfg.get_i("threads") != 1)
        std::fprintf(stderr, "note: results are deterministic only with --threads 1\n");

    if (cmd == "train-seq") return cmd_train_seq(cfg);
    if (cmd == "train-wm") return cmd_train_wm(cfg);
    if (cmd == "trace") return cmd_trace(cfg);
    if (cmd == "grid-search") return cmd_grid_search(cfg);
    if (cmd == "gen-data") return cmd_gen_data(cfg);
    throw ParamError("unknown command: " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ParamError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
