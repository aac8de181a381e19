#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "swm/layers.hpp"
#include "swm/neuron.hpp"
#include "swm/optimizer.hpp"
#include "swm/rng.hpp"
#include "swm/tensor.hpp"

namespace swm {

// Synthetic long-memory sequence tasks: generation is a pure function of
// (config, n), so datasets are bit-identical across runs and platforms.

struct TaskConfig {
    std::string kind = "delayed-recall";  // or "sequential-parity"
    std::size_t T = 20;
    std::size_t delay = 5;
    std::size_t n_classes = 4;
    std::size_t channels = 5;  // delayed recall: one per class plus a trigger
    double jitter = 0.0;       // noise spike probability per cell
    std::uint64_t seed = 0;

    void validate() const;
};

struct SpikeSequenceSample {
    Tensor spikes;  // [T, channels], entries exactly 0 or 1
    std::size_t label = 0;
};

struct SpikeDataset {
    std::size_t T = 0, channels = 0, n_classes = 0;
    std::vector<SpikeSequenceSample> samples;
    TaskConfig meta;  // generating parameters, default for external data

    std::size_t size() const { return samples.size(); }
    void validate() const;
};

// Class cue as a 5-tick burst on the label's channel, a noise-only gap of
// `delay` ticks, then a 5-tick trigger burst on the last channel. Labels are
// assigned round-robin, so classes stay balanced within one sample. Nothing
// after the cue window depends on the label.
SpikeDataset gen_delayed_recall(const TaskConfig& cfg, std::size_t n);

// Random pulse train on channel 0; the label is the parity of the pulse
// count, so flipping any one cell flips the class.
SpikeDataset gen_sequential_parity(const TaskConfig& cfg, std::size_t n);

// dispatch on cfg.kind
SpikeDataset gen_dataset(const TaskConfig& cfg, std::size_t n);

// Bernoulli encoding of rates x in [0,1]^dim into spikes [T, dim]. Each cell
// draws from a counter RNG keyed by (seed, sample id, tick, channel), so the
// raster is a pure function of its arguments. Out-of-range rates are clipped;
// the clip count goes to *clipped when given, otherwise one warning line is
// printed to stderr.
Tensor rate_encode(const Tensor& x, std::size_t T, std::uint64_t seed = 0,
                   std::uint64_t sample_id = 0, std::size_t* clipped = nullptr);

// Event-list spike container (magic "SPK1"): header T/channels/n_samples/
// n_classes, then per sample a label and its (tick, channel) events. Loaders
// reject out-of-range events, labels and truncated payloads with the failing
// byte offset.
void save_spikes(const std::string& path, const SpikeDataset& data);
SpikeDataset load_spikes(const std::string& path);

// ---- sequence classification ------------------------------------------------

struct ClassifierConfig {
    std::string neuron = "mcn";  // or "lif"
    std::size_t hidden = 32;     // encoder width; also the gated-layer width
    std::size_t readout_window = 5;
    double tau_ro = 2.0;
    NeuronParams params;
    // fan-in init must push the sparsely driven body into the spiking regime,
    // or the whole stack stays silent and gradient-free
    double init_gain = 6.0;
    double lr = 1e-3;
    std::size_t batch = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

// Encoder -> recurrent spiking body -> leaky readout, class logits taken as
// the readout mean over the final ticks. The "lif" variant swaps the gated
// recurrent layer for a feedforward one widened to match its parameter count.
class SeqClassifier {
public:
    SeqClassifier(const ClassifierConfig& cfg, std::size_t channels, std::size_t n_classes);

    struct Eval {
        double loss = 0.0;
        double accuracy = 0.0;
    };

    // mean NLL and accuracy over the named samples; no parameter updates
    Eval evaluate(const SpikeDataset& data, const std::vector<std::size_t>& idx);

    // one optimizer step on the named samples; returns the batch NLL
    double train_batch(const SpikeDataset& data, const std::vector<std::size_t>& idx);

    // feedforward width giving the "lif" stack the same parameter count as
    // the gated stack of width `hidden`
    static std::size_t matched_lif_width(std::size_t hidden, std::size_t n_classes);

    // body internals at every tick of one sample's forward pass; gated variant
    // only (the feedforward body has no apical compartment to report).
    // All tensors [1, hidden]; spike rows are post-reset state.
    struct TickTrace {
        Tensor v_basal, v_apical, u, z_gate, spike;
    };
    std::vector<TickTrace> trace_sample(const SpikeDataset& data, std::size_t idx) const;

    std::size_t param_count() const { return store_.numel(); }
    const ClassifierConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    Adam& optimizer() { return opt_; }
    std::size_t channels() const { return channels_; }
    std::size_t n_classes() const { return n_classes_; }

private:
    Var logits(Tape& t, const Binding& b, const SpikeDataset& data,
               const std::vector<std::size_t>& idx) const;

    ClassifierConfig cfg_;
    std::size_t channels_, n_classes_;
    ParamStore store_;
    std::vector<LIFDenseLayer> lif_;  // [encoder] or [encoder, wide body]
    std::vector<MCNLayer> mcn_;       // [gated body] in the "mcn" variant
    std::vector<ReadoutLayer> out_;
    Adam opt_;
};

struct EpochStat {
    std::size_t epoch = 0;
    std::string split;  // "train" or "test"
    double accuracy = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<EpochStat> curve;
    double final_test_accuracy = 0.0;
    double final_test_loss = 0.0;
};

// Deterministic 80/20 split (leading samples train), shuffled minibatches,
// one train and one test curve row per epoch. Throws NumericError with the
// failing epoch and batch if the loss leaves the finite range.
TrainResult train_classifier(SeqClassifier& model, const SpikeDataset& data, std::size_t epochs);

// "epoch,split,accuracy,loss" rows
std::string curve_csv(const std::vector<EpochStat>& curve);

}  // namespace swm
