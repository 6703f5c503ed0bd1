#include "subjectopt/engine.hpp"

#include "subjectopt/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace subjectopt {

std::string to_string(StopReason reason) {
    switch (reason) {
    case StopReason::early_stop: return "early_stop";
    case StopReason::max_iterations: return "max_iterations";
    case StopReason::user_stop: return "user_stop";
    case StopReason::error: return "error";
    }
    return "error";
}

StopReason stop_reason_from_string(const std::string& name) {
    if (name == "early_stop") return StopReason::early_stop;
    if (name == "max_iterations") return StopReason::max_iterations;
    if (name == "user_stop") return StopReason::user_stop;
    if (name == "error") return StopReason::error;
    throw ConfigError("unknown stop reason '" + name + "'");
}

bool should_stop(std::span<const double> loss_history, double x_percent, int n_window) {
    if (n_window < 1 || loss_history.size() < static_cast<std::size_t>(n_window) + 1) return false;
    const auto split = loss_history.end() - n_window;
    const double best_before = *std::min_element(loss_history.begin(), split);
    const double best_window = *std::min_element(split, loss_history.end());
    const bool improved = best_window < best_before * (1.0 - x_percent / 100.0);
    return !improved;
}

AdapterOptimizer::AdapterOptimizer(OptimizerKind kind, double learning_rate, AdamSettings adam)
    : kind_(kind), learning_rate_(learning_rate), adam_(adam) {}

void AdapterOptimizer::step(AdapterParams& params, const AdapterGradients& grads) {
    ++iterations_;
    if (kind_ == OptimizerKind::sgd) {
        for (const auto& [id, g] : grads) {
            auto it = params.layers.find(id);
            if (it == params.layers.end()) continue;
            it->second.down -= learning_rate_ * g.down;
            it->second.up -= learning_rate_ * g.up;
        }
        return;
    }
    const double t = static_cast<double>(iterations_);
    const double c1 = 1.0 - std::pow(adam_.beta1, t);
    const double c2 = 1.0 - std::pow(adam_.beta2, t);
    auto update = [&](Eigen::MatrixXd& theta, const Eigen::MatrixXd& g, Eigen::MatrixXd& m, Eigen::MatrixXd& v) {
        if (m.size() == 0) {
            m = Eigen::MatrixXd::Zero(g.rows(), g.cols());
            v = Eigen::MatrixXd::Zero(g.rows(), g.cols());
        }
        m = adam_.beta1 * m + (1.0 - adam_.beta1) * g;
        v = adam_.beta2 * v + (1.0 - adam_.beta2) * g.cwiseProduct(g);
        const Eigen::ArrayXXd m_hat = m.array() / c1;
        const Eigen::ArrayXXd v_hat = v.array() / c2;
        theta.array() -= learning_rate_ * m_hat / (v_hat.sqrt() + adam_.epsilon);
    };
    for (const auto& [id, g] : grads) {
        auto it = params.layers.find(id);
        if (it == params.layers.end()) continue;
        auto& m = first_moment_[id];
        auto& v = second_moment_[id];
        update(it->second.down, g.down, m.down, v.down);
        update(it->second.up, g.up, m.up, v.up);
    }
}

StepResult optimization_step(const GenerationContext& ctx, const AdapterParams& adapters, AdapterOptimizer& optimizer,
                             const ImageObjective& objective, int step_index) {
    if (!ctx.backbone) throw ConfigError("optimization_step: no backbone");
    const std::string where = "step " + std::to_string(step_index) + ": ";
    StepResult out;
    out.frame.step_index = step_index;
    AdapterGradients grads;
    try {
        DifferentiableImage gen = ctx.backbone->generate_differentiable(ctx.prompt, ctx.latent, adapters,
                                                                        ctx.schedule.steps, ctx.schedule.truncation);
        LossEvaluation eval = objective.evaluate(gen.image);
        if (!std::isfinite(eval.report.total))
            throw NumericError(where + "non-finite loss (" + std::to_string(eval.report.total) + ")");
        grads = gen.backward(eval.gradient);
        if (!all_finite(grads)) throw NumericError(where + "non-finite adapter gradient");
        out.frame.image = std::move(gen.image);
        out.frame.losses = eval.report;
    } catch (const NumericError&) {
        throw;
    } catch (const std::exception& e) {
        throw Error(where + e.what());
    }
    out.updated = adapters;
    optimizer.step(out.updated, grads);
    return out;
}

OptimizationResult run_optimization(const GenerationContext& ctx, const AdapterParams& initial,
                                    const ImageObjective& objective, const OptimizationConfig& config,
                                    std::stop_token stop, const FrameCallback& on_frame) {
    config.validate();
    OptimizationResult result;
    result.best_adapters = initial;
    AdapterOptimizer optimizer(config);
    AdapterParams current = initial;
    double best_total = std::numeric_limits<double>::infinity();
    const auto start = std::chrono::steady_clock::now();
    const int stride = std::max(1, config.frame_stride);

    for (int i = 0; i < config.max_iterations; ++i) {
        if (stop.stop_requested()) {
            result.decision = {StopReason::user_stop, i - 1, "stop requested"};
            return result;
        }
        StepResult step;
        try {
            step = optimization_step(ctx, current, optimizer, objective, i);
        } catch (const std::exception& e) {
            result.decision = {StopReason::error, i, e.what()};
            return result;
        }
        step.frame.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const double total = step.frame.losses.total;
        result.loss_history.push_back(total);
        if (total < best_total) {
            best_total = total;
            result.best_index = i;
            result.best_adapters = current;
        }
        if (on_frame) on_frame(step.frame, current);
        if (i % stride == 0) result.frames.push_back(std::move(step.frame));
        current = std::move(step.updated);

        if (config.early_stop.enabled &&
            should_stop(result.loss_history, config.early_stop.x_percent, config.early_stop.n_window)) {
            result.decision = {StopReason::early_stop, i, "no improvement over the last window"};
            return result;
        }
        if (stop.stop_requested()) {
            result.decision = {StopReason::user_stop, i, "stop requested"};
            return result;
        }
    }
    result.decision = {StopReason::max_iterations, config.max_iterations - 1, "iteration budget reached"};
    return result;
}

} // namespace subjectopt
