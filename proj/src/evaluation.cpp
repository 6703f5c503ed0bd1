#include "subjectopt/evaluation.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"
#include "subjectopt/rng.hpp"
#include "subjectopt/session_store.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace subjectopt {

double cosine_similarity(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    if (u.size() != v.size()) throw ConfigError("cosine_similarity: dimension mismatch");
    const double nu = u.norm();
    const double nv = v.norm();
    if (nu == 0.0 || nv == 0.0) throw NumericError("cosine_similarity: zero vector");
    return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

namespace {

Image subject_crop(const Image& image, const ObjectDetector* detector, const std::string& label, double threshold,
                   bool& full_image) {
    full_image = true;
    if (!detector || label.empty()) return image;
    try {
        const Detection d = detect_subject(image, label, *detector, threshold);
        full_image = false;
        return crop(image, d.box);
    } catch (const std::exception&) {
        return image;
    }
}

void require(const ExtractorHandle& h, const char* role) {
    if (!h) throw ConfigError(std::string("evaluation needs a ") + role + " extractor");
}

} // namespace

IdentityScores identity_scores(const std::vector<Image>& generated, const Image& subject,
                               const IdentityExtractors& extractors, const ObjectDetector* detector,
                               const std::string& class_label, double threshold) {
    if (generated.empty()) throw ConfigError("identity_scores: no generated images");
    require(extractors.dino, "DINO");
    require(extractors.ir, "IR");
    require(extractors.clip, "CLIP image");
    bool subject_full = true;
    const Image ref = subject_crop(subject, detector, class_label, threshold, subject_full);
    const Eigen::VectorXd ref_dino = extractors.dino.embed(ref);
    const Eigen::VectorXd ref_ir = extractors.ir.embed(ref);
    const Eigen::VectorXd ref_clip = extractors.clip.embed(ref);

    IdentityScores s;
    for (const Image& g : generated) {
        bool full = true;
        const Image c = subject_crop(g, detector, class_label, threshold, full);
        s.full_image.push_back(full);
        s.dino += cosine_similarity(extractors.dino.embed(c), ref_dino);
        s.ir += cosine_similarity(extractors.ir.embed(c), ref_ir);
        s.clip_i += cosine_similarity(extractors.clip.embed(c), ref_clip);
    }
    const double n = static_cast<double>(generated.size());
    s.dino /= n;
    s.ir /= n;
    s.clip_i /= n;
    return s;
}

double prompt_adherence(const std::vector<Image>& generated, const std::vector<std::string>& prompts,
                        const ExtractorHandle& clip_image, const TextEncoder& clip_text) {
    if (generated.size() != prompts.size())
        throw ConfigError("prompt_adherence: " + std::to_string(generated.size()) + " images but " +
                          std::to_string(prompts.size()) + " prompts");
    if (generated.empty()) throw ConfigError("prompt_adherence: no samples");
    require(clip_image, "CLIP image");
    double sum = 0.0;
    for (std::size_t i = 0; i < generated.size(); ++i)
        sum += cosine_similarity(clip_image.embed(generated[i]), clip_text.embed_text(prompts[i]));
    return sum / static_cast<double>(generated.size());
}

namespace {

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
    mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

bool nearly_singular(const Eigen::MatrixXd& cov) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();
    return ev.minCoeff() <= 1e-12 * std::max(1.0, ev.maxCoeff());
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

FrechetResult frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() < 2 || b.rows() < 2) throw ConfigError("Frechet distance needs at least two samples per set");
    if (a.cols() != b.cols()) throw ConfigError("Frechet distance: feature dimensions differ");
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1 = covariance(a, mu1);
    Eigen::MatrixXd s2 = covariance(b, mu2);
    FrechetResult r;
    if (nearly_singular(s1) || nearly_singular(s2)) {
        const Eigen::MatrixXd eps = 1e-6 * Eigen::MatrixXd::Identity(s1.rows(), s1.cols());
        s1 += eps;
        s2 += eps;
        r.regularized = true;
    }
    const Eigen::MatrixXd root1 = symmetric_sqrt(s1);
    const Eigen::MatrixXd inner = root1 * s2 * root1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    r.value = std::max(0.0, (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt);
    return r;
}

double polynomial_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    const double k = x.dot(y) / static_cast<double>(x.size()) + 1.0;
    return k * k * k;
}

double kid_mmd2(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const Eigen::Index m = x.rows();
    const Eigen::Index n = y.rows();
    if (m < 2 || n < 2) throw ConfigError("KID needs at least two samples per set");
    if (x.cols() != y.cols()) throw ConfigError("KID: feature dimensions differ");
    const double d = static_cast<double>(x.cols());
    auto kernel = [d](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
        return ((p * q.transpose()).array() / d + 1.0).cube().matrix().eval();
    };
    const Eigen::MatrixXd kxx = kernel(x, x);
    const Eigen::MatrixXd kyy = kernel(y, y);
    const Eigen::MatrixXd kxy = kernel(x, y);
    const double sxx = (kxx.sum() - kxx.trace()) / static_cast<double>(m * (m - 1));
    const double syy = (kyy.sum() - kyy.trace()) / static_cast<double>(n * (n - 1));
    // Equal sizes: rows are paired and the cross term skips i == j as well.
    if (m == n) return sxx + syy - 2.0 * (kxy.sum() - kxy.trace()) / static_cast<double>(m * (m - 1));
    return sxx + syy - 2.0 * kxy.sum() / static_cast<double>(m * n);
}

namespace {

std::vector<Eigen::Index> sample_indices(Eigen::Index rows, Eigen::Index count, Rng& rng) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(rows));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index i = 0; i < count; ++i) {
        const auto j = i + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(rows - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(count));
    return idx;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
    return out;
}

} // namespace

KidResult kernel_inception_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int subset_size,
                                    int subsets, std::uint64_t seed) {
    if (subsets < 1 || subset_size < 2) throw ConfigError("KID needs subsets >= 1 and subset size >= 2");
    const Eigen::Index m = std::min<Eigen::Index>({x.rows(), y.rows(), subset_size});
    if (m < 2) throw ConfigError("KID needs at least two samples per set");
    Rng rng(seed);
    std::vector<double> values;
    for (int s = 0; s < subsets; ++s) {
        const auto ix = sample_indices(x.rows(), m, rng);
        // Same-size sets share one draw so identical inputs score exactly 0.
        const auto iy = x.rows() == y.rows() ? ix : sample_indices(y.rows(), m, rng);
        values.push_back(kid_mmd2(take_rows(x, ix), take_rows(y, iy)));
    }
    KidResult r;
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return r;
}

double cmmd(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double sigma, double scale) {
    if (x.rows() < 1 || y.rows() < 1) throw ConfigError("CMMD needs non-empty sets");
    if (x.cols() != y.cols()) throw ConfigError("CMMD: feature dimensions differ");
    const double gamma = 1.0 / (2.0 * sigma * sigma);
    auto mean_kernel = [gamma](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
        const Eigen::VectorXd pn = p.rowwise().squaredNorm();
        const Eigen::VectorXd qn = q.rowwise().squaredNorm();
        Eigen::MatrixXd d2 = -2.0 * p * q.transpose();
        d2.colwise() += pn;
        d2.rowwise() += qn.transpose();
        return (-gamma * d2.array().cwiseMax(0.0)).exp().mean();
    };
    return scale * (mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y));
}

namespace {

Eigen::MatrixXd stack(const std::vector<Image>& images, const std::function<Eigen::VectorXd(const Image&)>& f) {
    Eigen::MatrixXd out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Eigen::VectorXd v = f(images[i]);
        if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), v.size());
        out.row(static_cast<Eigen::Index>(i)) = v.transpose();
    }
    return out;
}

} // namespace

NaturalnessScores naturalness(const std::vector<Image>& generated, const std::vector<Image>& reference,
                              const ExtractorHandle& inception, const ExtractorHandle& clip_image) {
    if (generated.size() < 2 || reference.size() < 2)
        throw ConfigError("naturalness needs at least two generated and two reference images");
    require(inception, "inception");
    require(clip_image, "CLIP image");
    auto raw = [&](const Image& im) { return inception.raw_features(im); };
    auto clip = [&](const Image& im) { return clip_image.embed(im); };
    const Eigen::MatrixXd fg = stack(generated, raw);
    const Eigen::MatrixXd fr = stack(reference, raw);
    NaturalnessScores s;
    const FrechetResult fid = frechet_distance(fg, fr);
    s.fid = fid.value;
    s.fid_regularized = fid.regularized;
    const KidResult kid = kernel_inception_distance(fg, fr);
    s.kid = kid.mean;
    s.kid_stddev = kid.stddev;
    s.cmmd = cmmd(stack(generated, clip), stack(reference, clip));
    return s;
}

double EmbeddingPerceptual::distance(const Image& a, const Image& b) const {
    return std::max(0.0, 1.0 - handle_.embed(a).dot(handle_.embed(b)));
}

BackgroundScores background_preservation(const std::vector<Image>& edited, const std::vector<Image>& originals,
                                         const std::vector<std::optional<Mask>>& masks,
                                         const PerceptualDistance& perceptual) {
    if (edited.size() != originals.size() || edited.size() != masks.size())
        throw ConfigError("background_preservation: edited, originals and masks must align");
    BackgroundScores s;
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < edited.size(); ++i) {
        if (!masks[i]) {
            s.skipped.push_back(true);
            s.per_sample.push_back(std::nan(""));
            continue;
        }
        const Image& orig = originals[i];
        const Mask& m = *masks[i];
        if (m.height != orig.height || m.width != orig.width)
            throw ConfigError("background_preservation: mask resolution differs from the original");
        const Image ed = edited[i].same_shape(orig) ? edited[i] : resize_bilinear(edited[i], orig.height, orig.width);
        const double d = perceptual.distance(zero_masked(ed, m), zero_masked(orig, m));
        s.skipped.push_back(false);
        s.per_sample.push_back(d);
        sum += d;
        ++used;
    }
    if (used > 0) s.mean = sum / static_cast<double>(used);
    return s;
}

double diversity(const std::vector<Image>& generated, const Image& subject) {
    if (generated.empty()) throw ConfigError("diversity: no generated images");
    double sum = 0.0;
    for (const Image& g : generated) {
        const Image r = g.same_shape(subject) ? g : resize_bilinear(g, subject.height, subject.width);
        sum += mean_squared_error(r, subject);
    }
    return sum / static_cast<double>(generated.size());
}

EvaluationBackends EvaluationBackends::defaults(const ExtractorRegistry& registry, const ModelCache& cache,
                                                bool stubs) {
    EvaluationBackends b;
    const bool use_stubs = stubs || cache.offline;
    b.identity.dino = registry.get(use_stubs ? "stub-pixel" : "dino-v2");
    b.identity.ir = registry.get(use_stubs ? "stub-pixel-half" : "ir-features");
    b.identity.clip = registry.get(use_stubs ? "stub-clip" : "clip-image");
    b.inception = registry.get(use_stubs ? "stub-inception" : "inception-pool3");
    b.clip_text = registry.text_encoder(use_stubs ? "stub-text" : "clip-text");
    b.detector = default_segmentation(cache, use_stubs).detector;
    if (use_stubs)
        b.perceptual = std::make_shared<PixelMsePerceptual>();
    else
        b.perceptual = std::make_shared<EmbeddingPerceptual>(registry.get("lpips-backbone"));
    return b;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string cell(const std::optional<double>& v, int precision = 3) {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, *v);
    return buf;
}

} // namespace

nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j{{"identity", {{"dino", r.dino}, {"ir", r.ir}, {"clip_i", r.clip_i}}},
                     {"prompt_adherence", {{"clip_t", optional_json(r.clip_t)}}},
                     {"background", {{"lpips", optional_json(r.lpips)}}},
                     {"diversity", {{"mse", optional_json(r.diversity_mse)}}},
                     {"n_samples", r.n_samples}};
    if (r.naturalness) {
        j["naturalness"] = {{"fid", r.naturalness->fid},
                            {"kid", r.naturalness->kid},
                            {"kid_stddev", r.naturalness->kid_stddev},
                            {"cmmd", r.naturalness->cmmd},
                            {"fid_regularized", r.naturalness->fid_regularized}};
    } else {
        j["naturalness"] = nullptr;
    }
    return j;
}

nlohmann::json to_json(const BenchmarkReport& b) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : b.samples) {
        samples.push_back({{"sample_id", s.sample_id},
                           {"task", s.task},
                           {"dino", s.dino},
                           {"ir", s.ir},
                           {"clip_i", s.clip_i},
                           {"clip_t", optional_json(s.clip_t)},
                           {"lpips", optional_json(s.lpips)},
                           {"mse", s.mse},
                           {"full_image", s.full_image},
                           {"mask_missing", s.mask_missing}});
    }
    return {{"report", to_json(b.report)},
            {"samples", samples},
            {"missing_files", b.missing_files},
            {"warnings", b.warnings}};
}

std::string render_table(const BenchmarkReport& b, const std::string& method) {
    const MetricReport& r = b.report;
    const bool editing = r.lpips.has_value() || (!r.clip_t && !b.samples.empty());
    std::optional<double> fid, kid, cm;
    if (r.naturalness) {
        fid = r.naturalness->fid;
        kid = r.naturalness->kid;
        cm = r.naturalness->cmmd;
    }
    std::ostringstream out;
    if (editing) {
        out << "| Method | DINO | IR | CLIP-I | LPIPS | FID | KID | CMMD |\n";
        out << "|---|---|---|---|---|---|---|---|\n";
        out << "| " << method << " | " << cell(r.dino) << " | " << cell(r.ir) << " | " << cell(r.clip_i) << " | "
            << cell(r.lpips) << " | " << cell(fid, 2) << " | " << cell(kid, 4) << " | " << cell(cm) << " |\n";
    } else {
        out << "| Method | DINO | IR | CLIP-I | CLIP-T | FID | KID | CMMD | MSE |\n";
        out << "|---|---|---|---|---|---|---|---|---|\n";
        out << "| " << method << " | " << cell(r.dino) << " | " << cell(r.ir) << " | " << cell(r.clip_i) << " | "
            << cell(r.clip_t) << " | " << cell(fid, 2) << " | " << cell(kid, 4) << " | " << cell(cm) << " | "
            << cell(r.diversity_mse) << " |\n";
    }
    out << "\nn = " << r.n_samples << "\n";
    if (!b.missing_files.empty()) {
        out << "\nMissing files:\n";
        for (const auto& m : b.missing_files) out << "- " << m << "\n";
    }
    return out.str();
}

namespace {

std::optional<std::string> opt_string(const nlohmann::json& j, const char* key, int line) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    if (!it->is_string())
        throw ValidationError(std::string(key), "line " + std::to_string(line) + ": expected a string");
    return it->get<std::string>();
}

} // namespace

BenchmarkReport run_benchmark(const fs::path& results_dir, const fs::path& manifest, const EvaluationBackends& backends) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot read manifest " + manifest.string());
    std::vector<nlohmann::json> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            records.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("manifest", "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (records.empty()) throw ConfigError("benchmark manifest " + manifest.string() + " is empty");

    auto resolve = [&](const std::string& p) {
        fs::path path = p;
        return path.is_relative() ? results_dir / path : path;
    };

    BenchmarkReport out;
    std::vector<Image> gen_outputs, gen_refs, edit_outputs, edit_inputs;
    double clip_t_sum = 0.0, lpips_sum = 0.0, mse_sum = 0.0;
    int clip_t_n = 0, lpips_n = 0;
    line_no = 0;
    for (const auto& rec : records) {
        ++line_no;
        SampleRecord s;
        s.sample_id = opt_string(rec, "sample_id", line_no).value_or("sample_" + std::to_string(line_no));
        const auto subject_path = opt_string(rec, "subject_path", line_no);
        const auto output_path = opt_string(rec, "output_path", line_no);
        const auto prompt = opt_string(rec, "prompt", line_no);
        const auto input_path = opt_string(rec, "input_path", line_no);
        const auto mask_path = opt_string(rec, "mask_path", line_no);
        const auto reference_path = opt_string(rec, "reference_path", line_no);
        const std::string label = opt_string(rec, "class", line_no).value_or("object");
        if (!subject_path || !output_path || (!prompt && !input_path))
            throw ValidationError("manifest", "line " + std::to_string(line_no) +
                                                  ": needs subject_path, output_path and prompt or input_path");
        s.task = prompt ? "generate" : "edit";

        bool missing = false;
        for (const auto* p : {&subject_path, &output_path, &input_path, &mask_path, &reference_path}) {
            if (*p && !fs::exists(resolve(**p))) {
                out.missing_files.push_back(s.sample_id + ": " + resolve(**p).string());
                missing = true;
            }
        }
        if (missing) continue;

        const Image subject = read_png(resolve(*subject_path));
        const Image output = read_png(resolve(*output_path));
        const IdentityScores id = identity_scores({output}, subject, backends.identity, backends.detector.get(), label,
                                                  backends.detection_threshold);
        s.dino = id.dino;
        s.ir = id.ir;
        s.clip_i = id.clip_i;
        s.full_image = id.full_image.front();
        s.mse = diversity({output}, subject);
        if (prompt) {
            if (backends.clip_text) {
                s.clip_t = prompt_adherence({output}, {*prompt}, backends.identity.clip, *backends.clip_text);
                clip_t_sum += *s.clip_t;
                ++clip_t_n;
            }
            if (reference_path) {
                gen_outputs.push_back(output);
                gen_refs.push_back(read_png(resolve(*reference_path)));
            }
        } else {
            const Image input = read_png(resolve(*input_path));
            std::optional<Mask> mask;
            if (mask_path) mask = read_mask_png(resolve(*mask_path));
            s.mask_missing = !mask;
            if (mask && backends.perceptual) {
                const auto bg = background_preservation({output}, {input}, {mask}, *backends.perceptual);
                s.lpips = bg.mean;
                lpips_sum += *bg.mean;
                ++lpips_n;
            }
            edit_outputs.push_back(output);
            edit_inputs.push_back(input);
        }
        mse_sum += s.mse;
        out.report.dino += s.dino;
        out.report.ir += s.ir;
        out.report.clip_i += s.clip_i;
        out.samples.push_back(std::move(s));
    }

    MetricReport& r = out.report;
    r.n_samples = static_cast<int>(out.samples.size());
    if (r.n_samples > 0) {
        const double n = r.n_samples;
        r.dino /= n;
        r.ir /= n;
        r.clip_i /= n;
        r.diversity_mse = mse_sum / n;
    }
    if (clip_t_n > 0) r.clip_t = clip_t_sum / clip_t_n;
    if (lpips_n > 0) r.lpips = lpips_sum / lpips_n;

    std::vector<Image> nat_gen = gen_outputs, nat_ref = gen_refs;
    nat_gen.insert(nat_gen.end(), edit_outputs.begin(), edit_outputs.end());
    nat_ref.insert(nat_ref.end(), edit_inputs.begin(), edit_inputs.end());
    if (nat_gen.size() >= 2 && nat_ref.size() >= 2) {
        try {
            r.naturalness = naturalness(nat_gen, nat_ref, backends.inception, backends.identity.clip);
        } catch (const std::exception& e) {
            out.warnings.push_back(std::string("naturalness skipped: ") + e.what());
        }
    } else {
        out.warnings.push_back("naturalness skipped: fewer than two samples with a reference image");
    }
    return out;
}

void write_benchmark(const BenchmarkReport& report, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    write_file_atomic(out_dir / "report.json", to_json(report).dump(2) + "\n");
    write_file_atomic(out_dir / "report.md", render_table(report));
}

} // namespace subjectopt
