#include "swm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>

#include "swm/error.hpp"
#include "swm/io.hpp"

namespace swm {
namespace {

constexpr std::uint64_t kNoiseSalt = 0x6e6f697365ULL;
constexpr std::uint64_t kPulseSalt = 0x70756c7365ULL;
constexpr std::uint64_t kRateSalt = 0x72617465ULL;
constexpr std::size_t kBurst = 5;  // cue and trigger width in ticks

}  // namespace

void TaskConfig::validate() const {
    if (kind != "delayed-recall" && kind != "sequential-parity")
        throw ParamError("unknown task kind '" + kind + "'");
    if (T < 1) throw ParamError("T must be at least 1");
    if (delay >= T) throw ParamError("delay must be smaller than T");
    if (!(jitter >= 0.0 && jitter < 0.5)) throw ParamError("jitter must lie in [0, 0.5)");
    if (n_classes < 2) throw ParamError("need at least 2 classes");
    if (channels < 1) throw ParamError("need at least 1 channel");
    if (kind == "delayed-recall") {
        if (channels < n_classes + 1)
            throw ParamError("delayed recall needs one channel per class plus a trigger");
        if (T < delay + 2 * kBurst)
            throw ParamError("delayed recall needs T >= delay + " + std::to_string(2 * kBurst));
    }
    if (kind == "sequential-parity" && n_classes != 2)
        throw ParamError("parity is a 2-class task");
}

void SpikeDataset::validate() const {
    if (T < 1 || channels < 1 || n_classes < 1) throw ContractError("degenerate dataset header");
    for (const SpikeSequenceSample& s : samples) {
        if (s.spikes.shape.rank != 2 || s.spikes.shape.d[0] != T || s.spikes.shape.d[1] != channels)
            throw ContractError("sample raster shape mismatch");
        if (s.label >= n_classes) throw ContractError("label out of range");
        for (double v : s.spikes.data)
            if (v != 0.0 && v != 1.0) throw ContractError("raster entries must be 0 or 1");
    }
}

SpikeDataset gen_delayed_recall(const TaskConfig& cfg, std::size_t n) {
    cfg.validate();
    if (cfg.kind != "delayed-recall") throw ParamError("config kind is not delayed-recall");
    SpikeDataset data;
    data.T = cfg.T;
    data.channels = cfg.channels;
    data.n_classes = cfg.n_classes;
    data.meta = cfg;
    const std::uint64_t key = hash_u64(cfg.seed, kNoiseSalt);
    const std::size_t trigger = cfg.channels - 1;
    for (std::size_t i = 0; i < n; ++i) {
        SpikeSequenceSample s;
        s.label = i % cfg.n_classes;
        s.spikes = Tensor{Shape(cfg.T, cfg.channels)};
        for (std::size_t t = 0; t < cfg.T; ++t)
            for (std::size_t c = 0; c < cfg.channels; ++c)
                if (counter_uniform(key, i, t, c) < cfg.jitter) s.spikes(t, c) = 1.0;
        for (std::size_t t = 0; t < kBurst; ++t) s.spikes(t, s.label) = 1.0;
        for (std::size_t t = 0; t < kBurst; ++t)
            s.spikes(kBurst + cfg.delay + t, trigger) = 1.0;
        data.samples.push_back(std::move(s));
    }
    return data;
}

SpikeDataset gen_sequential_parity(const TaskConfig& cfg, std::size_t n) {
    cfg.validate();
    if (cfg.kind != "sequential-parity") throw ParamError("config kind is not sequential-parity");
    SpikeDataset data;
    data.T = cfg.T;
    data.channels = cfg.channels;
    data.n_classes = 2;
    data.meta = cfg;
    const std::uint64_t key = hash_u64(cfg.seed, kPulseSalt);
    for (std::size_t i = 0; i < n; ++i) {
        SpikeSequenceSample s;
        s.spikes = Tensor{Shape(cfg.T, cfg.channels)};
        std::size_t pulses = 0;
        for (std::size_t t = 0; t < cfg.T; ++t) {
            if (counter_uniform(key, i, t, 0) < 0.5) {
                s.spikes(t, 0) = 1.0;
                ++pulses;
            }
        }
        s.label = pulses % 2;
        data.samples.push_back(std::move(s));
    }
    return data;
}

SpikeDataset gen_dataset(const TaskConfig& cfg, std::size_t n) {
    cfg.validate();
    return cfg.kind == "delayed-recall" ? gen_delayed_recall(cfg, n)
                                        : gen_sequential_parity(cfg, n);
}

Tensor rate_encode(const Tensor& x, std::size_t T, std::uint64_t seed, std::uint64_t sample_id,
                   std::size_t* clipped) {
    if (T < 1) throw ParamError("T must be at least 1");
    if (!x.finite()) throw NumericError("non-finite rate");
    const std::size_t dim = x.shape.numel();
    if (dim == 0) throw ParamError("empty rate vector");

    std::size_t n_clipped = 0;
    Tensor rates = x;
    for (double& v : rates.data) {
        if (v < 0.0 || v > 1.0) {
            ++n_clipped;
            v = std::min(std::max(v, 0.0), 1.0);
        }
    }
    if (clipped) {
        *clipped = n_clipped;
    } else if (n_clipped > 0) {
        std::cerr << "rate_encode: clipped " << n_clipped << " rate(s) into [0, 1]\n";
    }

    const std::uint64_t key = hash_u64(seed, kRateSalt);
    Tensor out{Shape(T, dim)};
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < dim; ++c)
            if (counter_uniform(key, sample_id, t, c) < rates.data[c]) out(t, c) = 1.0;
    return out;
}

namespace {
constexpr char kSpikeMagic[4] = {'S', 'P', 'K', '1'};
}

void save_spikes(const std::string& path, const SpikeDataset& data) {
    data.validate();
    if (data.T > 65536 || data.channels > 65536 || data.n_classes > 65536)
        throw ParamError("dataset dimensions exceed the 16-bit event format");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    BinWriter w(out);
    w.bytes(kSpikeMagic, 4);
    w.u32(std::uint32_t(data.T));
    w.u32(std::uint32_t(data.channels));
    w.u32(std::uint32_t(data.samples.size()));
    w.u32(std::uint32_t(data.n_classes));
    for (const SpikeSequenceSample& s : data.samples) {
        w.u16(std::uint16_t(s.label));
        std::uint32_t n_events = 0;
        for (double v : s.spikes.data) n_events += v != 0.0;
        w.u32(n_events);
        for (std::size_t t = 0; t < data.T; ++t)
            for (std::size_t c = 0; c < data.channels; ++c)
                if (s.spikes(t, c) != 0.0) {
                    w.u16(std::uint16_t(t));
                    w.u16(std::uint16_t(c));
                }
    }
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

SpikeDataset load_spikes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    BinReader r(in);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kSpikeMagic, 4) != 0) r.fail("not a spike file (bad magic)");

    SpikeDataset data;
    data.T = r.u32();
    data.channels = r.u32();
    const std::uint32_t n_samples = r.u32();
    data.n_classes = r.u32();
    if (data.T == 0 || data.channels == 0 || data.n_classes == 0)
        r.fail("zero-sized header field");
    if (data.T > 65536 || data.channels > 65536 || data.n_classes > 65536 ||
        n_samples > (1u << 24))
        r.fail("implausible header");

    data.samples.reserve(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        SpikeSequenceSample s;
        s.label = r.u16();
        if (s.label >= data.n_classes) r.fail("label out of range");
        const std::uint32_t n_events = r.u32();
        if (n_events > data.T * data.channels) r.fail("more events than raster cells");
        s.spikes = Tensor{Shape(data.T, data.channels)};
        for (std::uint32_t e = 0; e < n_events; ++e) {
            const std::uint16_t t = r.u16();
            const std::uint16_t c = r.u16();
            if (t >= data.T) r.fail("event tick out of range");
            if (c >= data.channels) r.fail("event channel out of range");
            s.spikes(t, c) = 1.0;
        }
        data.samples.push_back(std::move(s));
    }
    if (!r.at_eof()) r.fail("trailing bytes after final sample");
    return data;
}

// ---- sequence classification ------------------------------------------------

void ClassifierConfig::validate() const {
    if (neuron != "mcn" && neuron != "lif") throw ParamError("neuron must be mcn or lif");
    if (hidden < 1) throw ParamError("hidden width must be positive");
    if (readout_window < 1) throw ParamError("readout window must be positive");
    if (tau_ro < 1.0) throw ParamError("tau_ro must be at least 1");
    if (lr <= 0.0) throw ParamError("learning rate must be positive");
    if (batch < 1) throw ParamError("batch size must be positive");
    params.validate();
}

std::size_t SeqClassifier::matched_lif_width(std::size_t hidden, std::size_t n_classes) {
    // gated body: 3 input-sized and 2 recurrent matrices of width h; the
    // feedforward body plus its readout must carry the same weight count
    const double extra = double(hidden) * (5.0 * double(hidden) + double(n_classes));
    return std::size_t(std::llround(extra / double(hidden + n_classes)));
}

SeqClassifier::SeqClassifier(const ClassifierConfig& cfg, std::size_t channels,
                             std::size_t n_classes)
    : cfg_(cfg), channels_(channels), n_classes_(n_classes), opt_(AdamConfig{}) {
    cfg_.validate();
    if (channels_ < 1 || n_classes_ < 2) throw ParamError("degenerate classifier dimensions");
    AdamConfig oc;
    oc.lr = cfg_.lr;
    opt_ = Adam(oc);

    Rng rng(hash_u64(cfg_.seed, 0x636c617373ULL));
    const std::size_t h = cfg_.hidden;
    lif_.emplace_back(store_, "enc", channels_, h, cfg_.params, rng, cfg_.init_gain);
    if (cfg_.neuron == "mcn") {
        mcn_.emplace_back(store_, "body", h, h, h, cfg_.params, rng, false, cfg_.init_gain);
        out_.emplace_back(store_, "out", h, n_classes_, cfg_.tau_ro, rng);
    } else {
        const std::size_t wide = matched_lif_width(h, n_classes_);
        lif_.emplace_back(store_, "body", h, wide, cfg_.params, rng, cfg_.init_gain);
        out_.emplace_back(store_, "out", wide, n_classes_, cfg_.tau_ro, rng);
    }
}

std::vector<SeqClassifier::TickTrace> SeqClassifier::trace_sample(const SpikeDataset& data,
                                                                  std::size_t idx) const {
    if (mcn_.empty()) throw ParamError("trace_sample: the \"lif\" body has no apical state; use neuron = mcn");
    if (data.channels != channels_)
        throw ContractError("trace_sample: dataset channels " + std::to_string(data.channels) +
                            " != model channels " + std::to_string(channels_));
    if (idx >= data.size()) throw ParamError("trace_sample: sample index out of range");
    Tape t;
    Binding b(t, store_);
    LIFState enc = lif_[0].initial(t, 1);
    MCNState body = mcn_[0].initial(t, 1);
    const Tensor& raster = data.samples[idx].spikes;
    std::vector<TickTrace> out;
    out.reserve(data.T);
    for (std::size_t tick = 0; tick < data.T; ++tick) {
        Tensor x{Shape(1, channels_)};
        for (std::size_t c = 0; c < channels_; ++c) x(0, c) = raster(tick, c);
        enc = lif_[0].step(t, b, enc, t.leaf(std::move(x)));
        body = mcn_[0].step(t, b, body, enc.s, enc.s);
        TickTrace tk;
        tk.v_basal = t.val(body.v_basal);
        tk.v_apical = t.val(body.v_apical);
        tk.u = t.val(body.u);
        tk.z_gate = mcn_[0].gate_values(t, body);
        tk.spike = t.val(body.s);
        out.push_back(std::move(tk));
    }
    return out;
}

Var SeqClassifier::logits(Tape& t, const Binding& b, const SpikeDataset& data,
                          const std::vector<std::size_t>& idx) const {
    const std::size_t B = idx.size();
    const std::size_t T = data.T;
    LIFState enc = lif_[0].initial(t, B);
    LIFState body_lif;
    MCNState body_mcn;
    const bool gated = !mcn_.empty();
    if (gated)
        body_mcn = mcn_[0].initial(t, B);
    else
        body_lif = lif_[1].initial(t, B);
    Var y = out_[0].initial(t, B);

    const std::size_t window = std::min<std::size_t>(cfg_.readout_window, T);
    Var acc;
    for (std::size_t tick = 0; tick < T; ++tick) {
        Tensor x{Shape(B, channels_)};
        for (std::size_t r = 0; r < B; ++r) {
            const Tensor& raster = data.samples[idx[r]].spikes;
            for (std::size_t c = 0; c < channels_; ++c) x(r, c) = raster(tick, c);
        }
        enc = lif_[0].step(t, b, enc, t.leaf(std::move(x)));
        Var spikes;
        if (gated) {
            body_mcn = mcn_[0].step(t, b, body_mcn, enc.s, enc.s);
            spikes = body_mcn.s;
        } else {
            body_lif = lif_[1].step(t, b, body_lif, enc.s);
            spikes = body_lif.s;
        }
        y = out_[0].step(t, b, y, spikes);
        if (tick + window >= T) acc = acc.valid() ? t.add(acc, y) : y;
    }
    return t.scale(acc, 1.0 / double(window));
}

SeqClassifier::Eval SeqClassifier::evaluate(const SpikeDataset& data,
                                            const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ParamError("evaluating on an empty index set");
    Eval ev;
    std::size_t done = 0;
    while (done < idx.size()) {
        const std::size_t take = std::min(cfg_.batch, idx.size() - done);
        std::vector<std::size_t> chunk(idx.begin() + std::ptrdiff_t(done),
                                       idx.begin() + std::ptrdiff_t(done + take));
        Tape t;
        Binding b(t, store_);
        Var lg = logits(t, b, data, chunk);
        const Tensor& lsm = t.val(t.log_softmax(lg));
        for (std::size_t r = 0; r < take; ++r) {
            const std::size_t label = data.samples[chunk[r]].label;
            ev.loss += -lsm(r, label);
            std::size_t best = 0;
            for (std::size_t k = 1; k < n_classes_; ++k)
                if (lsm(r, k) > lsm(r, best)) best = k;
            ev.accuracy += best == label ? 1.0 : 0.0;
        }
        done += take;
    }
    ev.loss /= double(idx.size());
    ev.accuracy /= double(idx.size());
    return ev;
}

double SeqClassifier::train_batch(const SpikeDataset& data, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ParamError("training on an empty index set");
    Tape t;
    Binding b(t, store_);
    Var lg = logits(t, b, data, idx);
    Tensor onehot{Shape(idx.size(), n_classes_)};
    for (std::size_t r = 0; r < idx.size(); ++r) onehot(r, data.samples[idx[r]].label) = 1.0;
    Var picked = t.sum_last(t.mul(t.log_softmax(lg), t.leaf(std::move(onehot))));
    Var loss = t.scale(t.mean(picked), -1.0);
    const double loss_value = t.val(loss).item();
    t.backward(loss);
    opt_.step(store_, b.grads());
    return loss_value;
}

TrainResult train_classifier(SeqClassifier& model, const SpikeDataset& data, std::size_t epochs) {
    data.validate();
    if (data.channels != model.channels() || data.n_classes != model.n_classes())
        throw ContractError("dataset does not match the classifier dimensions");
    const std::size_t n = data.size();
    if (n < 5) throw ParamError("need at least 5 samples for an 80/20 split");
    const std::size_t n_train = n * 4 / 5;

    std::vector<std::size_t> train_idx(n_train), test_idx(n - n_train);
    for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
    for (std::size_t i = n_train; i < n; ++i) test_idx[i - n_train] = i;

    TrainResult res;
    Rng shuffle(hash_u64(model.config().seed, 0x73687566666cULL));
    std::vector<std::size_t> order = train_idx;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        for (std::size_t i = 0; i + 1 < order.size(); ++i)
            std::swap(order[i], order[i + shuffle.below(order.size() - i)]);
        std::size_t done = 0, batch_no = 0;
        while (done < order.size()) {
            const std::size_t take = std::min(model.config().batch, order.size() - done);
            std::vector<std::size_t> chunk(order.begin() + std::ptrdiff_t(done),
                                           order.begin() + std::ptrdiff_t(done + take));
            const double loss = model.train_batch(data, chunk);
            if (!std::isfinite(loss))
                throw NumericError("loss diverged at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_no));
            done += take;
            ++batch_no;
        }
        SeqClassifier::Eval tr = model.evaluate(data, train_idx);
        SeqClassifier::Eval te = model.evaluate(data, test_idx);
        if (!std::isfinite(tr.loss) || !std::isfinite(te.loss))
            throw NumericError("evaluation loss diverged at epoch " + std::to_string(epoch));
        res.curve.push_back({epoch, "train", tr.accuracy, tr.loss});
        res.curve.push_back({epoch, "test", te.accuracy, te.loss});
        res.final_test_accuracy = te.accuracy;
        res.final_test_loss = te.loss;
    }
    return res;
}

std::string curve_csv(const std::vector<EpochStat>& curve) {
    std::string out = "epoch,split,accuracy,loss\n";
    char line[128];
    for (const EpochStat& s : curve) {
        std::snprintf(line, sizeof line, "%zu,%s,%.6f,%.6f\n", s.epoch, s.split.c_str(),
                      s.accuracy, s.loss);
        out += line;
    }
    return out;
}

}  // namespace swm
