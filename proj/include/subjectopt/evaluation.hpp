#pragma once

#include "subjectopt/feature_extractors.hpp"
#include "subjectopt/image.hpp"
#include "subjectopt/model_cache.hpp"
#include "subjectopt/segmentation.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace subjectopt {

struct IdentityExtractors {
    ExtractorHandle dino;
    ExtractorHandle ir;
    ExtractorHandle clip;
};

struct IdentityScores {
    double dino = 0.0;
    double ir = 0.0;
    double clip_i = 0.0;
    // Per sample: detection failed, scored on the full image.
    std::vector<bool> full_image;
};

double cosine_similarity(const Eigen::VectorXd& u, const Eigen::VectorXd& v);

/// Mean cosine similarity between subject crops of each generated image and
/// of the reference. `detector` may be null (full images are used).
IdentityScores identity_scores(const std::vector<Image>& generated, const Image& subject,
                               const IdentityExtractors& extractors, const ObjectDetector* detector,
                               const std::string& class_label, double threshold = 0.3);

/// Mean image-text cosine similarity. Throws ConfigError on a length mismatch.
double prompt_adherence(const std::vector<Image>& generated, const std::vector<std::string>& prompts,
                        const ExtractorHandle& clip_image, const TextEncoder& clip_text);

struct FrechetResult {
    double value = 0.0;
    // Covariances were singular and eps*I (1e-6) was added.
    bool regularized = false;
};

/// Frechet distance between Gaussians fitted to two feature sets (rows are
/// samples). Needs at least two rows each.
FrechetResult frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// (x.y / d + 1)^3
double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Unbiased MMD^2 with the cubic polynomial kernel. Equal-size sets use
/// the paired U-statistic (no i == j terms anywhere).
double kid_mmd2(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct KidResult {
    double mean = 0.0;
    double stddev = 0.0;
};

/// Mean unbiased MMD^2 over `subsets` random subsets of size
/// min(n, subset_size), drawn without replacement. Same-size sets share
/// the row draw.
KidResult kernel_inception_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int subset_size = 100,
                                    int subsets = 10, std::uint64_t seed = 0);

/// Gaussian-RBF MMD^2 (sigma 10, scaled by 1000), all pairs included.
double cmmd(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double sigma = 10.0, double scale = 1000.0);

struct NaturalnessScores {
    double fid = 0.0;
    double kid = 0.0;
    double kid_stddev = 0.0;
    double cmmd = 0.0;
    bool fid_regularized = false;
};

NaturalnessScores naturalness(const std::vector<Image>& generated, const std::vector<Image>& reference,
                              const ExtractorHandle& inception, const ExtractorHandle& clip_image);

class PerceptualDistance {
public:
    virtual ~PerceptualDistance() = default;
    virtual double distance(const Image& a, const Image& b) const = 0;
};

// Stub perceptual network: plain pixel MSE.
class PixelMsePerceptual final : public PerceptualDistance {
public:
    double distance(const Image& a, const Image& b) const override { return mean_squared_error(a, b); }
};

// Cosine distance between unit embeddings of one extractor.
class EmbeddingPerceptual final : public PerceptualDistance {
public:
    explicit EmbeddingPerceptual(ExtractorHandle handle) : handle_(std::move(handle)) {}
    double distance(const Image& a, const Image& b) const override;

private:
    ExtractorHandle handle_;
};

struct BackgroundScores {
    std::optional<double> mean; // unset when every sample was skipped
    std::vector<double> per_sample;
    std::vector<bool> skipped; // mask missing
};

/// Perceptual distance between edited and original with the subject zeroed
/// out in both. Samples without a mask are skipped and flagged.
BackgroundScores background_preservation(const std::vector<Image>& edited, const std::vector<Image>& originals,
                                         const std::vector<std::optional<Mask>>& masks,
                                         const PerceptualDistance& perceptual);

/// Mean pixel MSE against the subject (generated images resized to it).
double diversity(const std::vector<Image>& generated, const Image& subject);

struct EvaluationBackends {
    IdentityExtractors identity;
    ExtractorHandle inception;
    std::shared_ptr<const TextEncoder> clip_text;
    std::shared_ptr<const ObjectDetector> detector;
    std::shared_ptr<const PerceptualDistance> perceptual;
    double detection_threshold = 0.3;

    // Stub backends when `stubs` is set or the cache is offline.
    static EvaluationBackends defaults(const ExtractorRegistry& registry, const ModelCache& cache, bool stubs);
};

struct MetricReport {
    double dino = 0.0;
    double ir = 0.0;
    double clip_i = 0.0;
    std::optional<double> clip_t;
    std::optional<NaturalnessScores> naturalness;
    std::optional<double> lpips;
    std::optional<double> diversity_mse;
    int n_samples = 0;
};

struct SampleRecord {
    std::string sample_id;
    std::string task; // "generate" when a prompt is given, else "edit"
    double dino = 0.0;
    double ir = 0.0;
    double clip_i = 0.0;
    std::optional<double> clip_t;
    std::optional<double> lpips;
    double mse = 0.0;
    bool full_image = false;
    bool mask_missing = false;
};

struct BenchmarkReport {
    MetricReport report;
    std::vector<SampleRecord> samples;
    std::vector<std::string> missing_files;
    std::vector<std::string> warnings;
};

nlohmann::json to_json(const MetricReport& report);
nlohmann::json to_json(const BenchmarkReport& report);
std::string render_table(const BenchmarkReport& report, const std::string& method = "subjectopt");

/// Scores a JSONL manifest of {sample_id, subject_path, prompt | input_path,
/// output_path, mask_path?, reference_path?, class?}. Relative paths
/// resolve against `results_dir`. Samples with missing files are listed and
/// skipped. Throws ConfigError on an empty manifest.
BenchmarkReport run_benchmark(const std::filesystem::path& results_dir, const std::filesystem::path& manifest,
                              const EvaluationBackends& backends);

// Writes report.json and report.md into `out_dir`.
void write_benchmark(const BenchmarkReport& report, const std::filesystem::path& out_dir);

} // namespace subjectopt
