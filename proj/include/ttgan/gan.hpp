#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ttgan/data.hpp"
#include "ttgan/network.hpp"

namespace ttgan {

struct GanConfig {
    double alpha = 0.5;
    double alpha_p = 0.05;
    double lambda_l1 = 0.01;
    double lr = 0.01;
    std::vector<std::size_t> lr_milestones{75, 110};
    std::vector<double> lr_factors{0.1, 0.1};
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 7;
    std::size_t epochs = 150;
    /// Epoch count the milestones and rp_start_epoch are stated against; both scale by epochs / schedule_epochs.
    std::size_t schedule_epochs = 150;
    std::size_t rp_start_epoch = 60;
    std::size_t latent_dim = 64;
    std::size_t class_count = 2;
    std::size_t gsp_position = 2;
    std::size_t c_rank = 20;
    std::size_t d_rank = 12;
    std::size_t tt_core_count = 3;
    std::uint64_t seed = 1;

    std::size_t volume_extent = 8;
    std::size_t c_depth = 30;
    std::size_t c_growth = 12;
    std::size_t d_depth = 30;
    std::size_t d_growth = 12;
    std::size_t g_channels = 32;
    double slope = 0.2;
    std::size_t contraction_threshold = 64;

    /// Throws ConfigError naming every violated constraint.
    void validate() const;
};

/// Reduced architecture and 20 epochs for CPU-scale runs; optimizer and loss settings unchanged.
GanConfig smoke_config();

/// Applies one `key=value` setting; throws ConfigError for unknown keys or unparsable values.
void set_config_key(GanConfig& c, const std::string& key, const std::string& value);
/// Keys accepted by set_config_key, in output order.
std::vector<std::string> config_keys();
/// One `key=value` line per key; parsing the text with config_from_text gives back the same config.
std::string config_to_text(const GanConfig& c);
GanConfig config_from_text(const std::string& text);

/// Learning rate for a 0-based epoch, milestones scaled to the run length.
double learning_rate(const GanConfig& c, std::size_t epoch);
/// floor(v * epochs / schedule_epochs).
std::size_t scaled_epoch(const GanConfig& c, std::size_t v);
std::size_t rp_start(const GanConfig& c);

DenseNetConfig classifier_net_config(const GanConfig& c);
DenseNetConfig discriminator_net_config(const GanConfig& c);
GeneratorConfig generator_net_config(const GanConfig& c);

// ---- losses on plain values ----------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

/// mean over each batch of -[log d_real + alpha log(1 - d_c) + (1 - alpha) log(1 - d_g)].
double discriminator_loss(std::span<const double> d_real, std::span<const double> d_c, std::span<const double> d_g,
                          double alpha);

/// Expectation form of the discriminator loss over a discrete support: each of the three
/// distributions weights the per-point terms at the discriminator outputs `d`.
double discriminator_objective(std::span<const double> p_real, std::span<const double> p_c,
                               std::span<const double> p_g, std::span<const double> d, double alpha);

struct ClassifierLoss {
    double r_l = 0.0;
    double r_p = 0.0;    // zero before the R_P start epoch
    double unsup = 0.0;  // mean log(1 - d_c)
    double total = 0.0;  // r_l + alpha_p r_p + unsup
};

/// Probabilities are [N, K] row distributions.
ClassifierLoss classifier_loss(const DenseTensor& probs_labeled, std::span<const std::size_t> labels,
                               const DenseTensor& probs_generated, std::span<const std::size_t> gen_labels,
                               std::span<const double> d_out_c, double alpha_p, std::size_t epoch,
                               std::size_t rp_start_epoch);

/// mean log(1 - d_g) + lambda * mean |x_real - x_g|.
double generator_loss(std::span<const double> d_g, const DenseTensor& x_g, const DenseTensor& x_real, double lambda);

// ---- state ------------------------------------------------------------------------------

struct StepCounters {
    std::size_t steps = 0;
    std::size_t labeled_samples = 0;
    std::size_t unlabeled_samples = 0;
    std::size_t unlabeled_batches = 0;
};

/// Generator, classifier and discriminator with their optimizer slots.
class ThreePlayerState {
public:
    explicit ThreePlayerState(const GanConfig& config);
    ThreePlayerState(const ThreePlayerState&) = delete;
    ThreePlayerState& operator=(const ThreePlayerState&) = delete;

    const GanConfig& config() const noexcept { return config_; }
    DenseNet3d& classifier() noexcept { return *classifier_; }
    DenseNet3d& discriminator() noexcept { return *discriminator_; }
    Generator& generator() noexcept { return *generator_; }

    ParamRefs& params(std::string_view player);
    std::vector<DenseTensor>& velocity(std::string_view player);
    /// Every batch norm of the three networks.
    std::vector<BatchNorm*> batch_norms();

    std::size_t epoch = 0;
    StepCounters counters;

private:
    GanConfig config_;
    std::unique_ptr<DenseNet3d> classifier_;
    std::unique_ptr<DenseNet3d> discriminator_;
    std::unique_ptr<Generator> generator_;
    std::vector<DenseTensor> c_velocity_, d_velocity_, g_velocity_;
};

/// Copy of every parameter, velocity and running statistic.
struct StateSnapshot {
    std::vector<DenseTensor> values;
    std::size_t epoch = 0;
    StepCounters counters;
};

StateSnapshot snapshot(ThreePlayerState& s);
void restore(ThreePlayerState& s, const StateSnapshot& snap);

/// SGD with Nesterov momentum: g' = g + wd w (decay params only); v = mu v - lr g'; w += mu v - lr g'.
void nesterov_update(ParamRefs& params, const std::vector<DenseTensor>& grads, std::vector<DenseTensor>& velocity,
                     double lr, double momentum, double weight_decay);

// ---- one step -----------------------------------------------------------------------------

/// Everything drawn at the start of a step.
struct StepBatch {
    DenseTensor x_l;                  // [Nl, e, e, e, 1]
    std::vector<std::size_t> y_l;
    DenseTensor x_u;                  // [Nu, e, e, e, 1]
    std::vector<std::size_t> y_c;     // categorical draws from the classifier on x_u
    DenseTensor z;                    // [Nl, latent], uniform(-1, 1)
    std::vector<std::size_t> y_g;     // a permutation of y_l
    DenseTensor x_g;                  // generator output before the step
    DenseTensor x_pair;               // same-class real partner of each generated sample
};

StepBatch prepare_step(ThreePlayerState& s, const DenseTensor& x_l, const std::vector<std::size_t>& y_l,
                       const DenseTensor& x_u, std::uint64_t seed);

struct StepReport {
    double loss_d = 0.0, loss_c = 0.0, loss_g = 0.0;
    double r_l = 0.0, r_p = 0.0, unsup = 0.0, l1 = 0.0;
    double grad_norm_d = 0.0, grad_norm_c = 0.0, grad_norm_g = 0.0;
    std::vector<double> d_real, d_c, d_g;  // discriminator outputs seen by the D update
    std::size_t labeled_used = 0, unlabeled_used = 0;
};

/// The three updates, each returning its loss before the update.
double discriminator_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report = nullptr);
double classifier_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report = nullptr);
double generator_update(ThreePlayerState& s, const StepBatch& b, double lr, StepReport* report = nullptr);

/// D, then C, then G. On a non-finite value the whole state is restored and a
/// StepError naming the failing player is thrown.
StepReport train_step(ThreePlayerState& s, const DenseTensor& x_l, const std::vector<std::size_t>& y_l,
                       const DenseTensor& x_u, double lr, std::uint64_t seed);

// ---- training loop -------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double loss_d = 0.0, loss_c = 0.0, loss_g = 0.0;
    double val_acc = 0.0, val_auc = 0.0;
    double lr = 0.0;
    std::size_t steps = 0;
};

struct TrainOptions {
    /// Called after every epoch, once validation has run.
    std::function<void(const EpochRecord&, ThreePlayerState&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::optional<StateSnapshot> best;
    double best_val_acc = -1.0;
    double best_val_auc = -1.0;
    std::size_t best_epoch = 0;
    std::optional<std::string> failure;  // set when a step error ended the run early
};

/// Runs epochs state.epoch .. config.epochs - 1 on split.train, validating on split.validation.
TrainResult train(ThreePlayerState& s, const DatasetSplit& split, const TrainOptions& options = {});

/// Recomputes batch-norm running statistics as equal-weight means of batch statistics:
/// the classifier over the training images, the generator over random draws.
void refresh_batch_norm(ThreePlayerState& s, const std::vector<VolumeSample>& train_samples, std::uint64_t seed);

/// Stacks sample volumes into [N, W, H, L, 1].
DenseTensor stack_volumes(const std::vector<const VolumeSample*>& samples);

/// Classifier class probabilities [N, K] in inference mode.
DenseTensor classify(ThreePlayerState& s, const DenseTensor& x);

/// `count` generated volumes of class `label` in inference mode, deterministic in `seed`.
DenseTensor sample(ThreePlayerState& s, std::size_t label, std::size_t count, std::uint64_t seed);
/// Same, with explicit latent codes z [N, latent].
DenseTensor sample_with_latent(ThreePlayerState& s, std::size_t label, const DenseTensor& z);

}  // namespace ttgan
