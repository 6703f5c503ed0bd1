#pragma once

#include "subjectopt/adapters.hpp"
#include "subjectopt/backbone.hpp"
#include "subjectopt/config.hpp"
#include "subjectopt/image.hpp"
#include "subjectopt/losses.hpp"

#include <functional>
#include <map>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

namespace subjectopt {

struct GeneratedFrame {
    int step_index = 0;
    Image image;
    LossReport losses;
    double wall_time = 0.0; // seconds since the run started

    double loss_total() const { return losses.total; }
    std::map<std::string, double> loss_components() const { return losses.components(); }
};

enum class StopReason { early_stop, max_iterations, user_stop, error };

std::string to_string(StopReason reason);
StopReason stop_reason_from_string(const std::string& name);

/// `stop_index` is the index of the last frame produced (-1 if none). For
/// `error` it is the step that failed.
struct StopDecision {
    StopReason reason = StopReason::max_iterations;
    int stop_index = -1;
    std::string message;
};

/// True iff the best of the last `n_window` losses does not improve on the
/// best loss before the window by more than `x_percent` percent. Histories
/// shorter than n_window + 1 never stop.
bool should_stop(std::span<const double> loss_history, double x_percent, int n_window);

/// Adam (or plain gradient descent) over every adapter factor.
class AdapterOptimizer {
public:
    AdapterOptimizer(OptimizerKind kind, double learning_rate, AdamSettings adam = {});
    explicit AdapterOptimizer(const OptimizationConfig& config)
        : AdapterOptimizer(config.optimizer, config.learning_rate, config.adam) {}

    // params <- params - step(grads). Layers absent from `grads` are left alone.
    void step(AdapterParams& params, const AdapterGradients& grads);
    long long iterations() const { return iterations_; }

private:
    OptimizerKind kind_;
    double learning_rate_;
    AdamSettings adam_;
    long long iterations_ = 0;
    AdapterGradients first_moment_;
    AdapterGradients second_moment_;
};

/// Everything that stays fixed across iterations of one run.
struct GenerationContext {
    const Backbone* backbone = nullptr;
    std::string prompt;
    Latent latent;
    Schedule schedule;
};

struct StepResult {
    GeneratedFrame frame;   // generated with the pre-update adapters
    AdapterParams updated;  // post-update adapters
};

// Throws NumericError on a non-finite loss or gradient; other failures are
// rethrown as Error prefixed with the step index.
StepResult optimization_step(const GenerationContext& ctx, const AdapterParams& adapters, AdapterOptimizer& optimizer,
                             const ImageObjective& objective, int step_index);

struct OptimizationResult {
    AdapterParams best_adapters;
    int best_index = -1;
    std::vector<GeneratedFrame> frames; // every frame_stride-th frame
    std::vector<double> loss_history;   // every frame
    StopDecision decision;
};

// Called once per frame, in step order, with the adapters that produced it.
using FrameCallback = std::function<void(const GeneratedFrame&, const AdapterParams&)>;

/// generate -> score -> backpropagate -> update, until early stop,
/// max_iterations, a stop request (polled between steps) or an error.
OptimizationResult run_optimization(const GenerationContext& ctx, const AdapterParams& initial,
                                    const ImageObjective& objective, const OptimizationConfig& config,
                                    std::stop_token stop = {}, const FrameCallback& on_frame = {});

} // namespace subjectopt
