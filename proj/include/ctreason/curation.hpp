#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ctreason/image.hpp"

namespace ctreason::curation {

// ---------------------------------------------------------------------------
// Volume-wise slice filtering
// ---------------------------------------------------------------------------

/// Binary masks per organ, indexed by slice. All masks share one shape.
struct VolumeMaskSeries {
    std::map<std::string, std::vector<Mask>> organs;

    int slice_count() const;
    int height() const;
    int width() const;
    /// Throws ShapeError when slice counts or mask shapes disagree.
    void validate() const;
};

enum class SweepDirection { forward, backward };

struct FilterConfig {
    double iou_thr = 0.75;
    double area_eps = 0.05;          ///< relative foreground-area change counted as negligible
    double small_organ_frac = 0.01;  ///< organs with peak area below this slice fraction are never dropped
    SweepDirection direction = SweepDirection::forward;
};

struct OrganExtent {
    int onset = -1, peak = -1, offset = -1;
    std::size_t peak_area = 0;
};

/// Onset/peak/offset per organ with nonzero presence (first maximum wins for the peak).
std::map<std::string, OrganExtent> organ_extents(const VolumeMaskSeries& series);

/// Retained slice indices, ascending. Onset, peak and offset of every organ are
/// always kept; background-only slices are dropped; a remaining slice is dropped
/// when, against the most recently retained slice of the sweep, the union
/// foreground IoU >= iou_thr and relative area change <= area_eps, unless it
/// contains a protected small organ.
std::vector<int> filter_slices(const VolumeMaskSeries& series, const FilterConfig& cfg = {});

// ---------------------------------------------------------------------------
// Visual prompts and structured prompt templates
// ---------------------------------------------------------------------------

struct VisualPromptSet {
    PixelRegion bbox;  ///< inclusive pixel corners
    int x_center = 0, y_center = 0;
};

/// Tight box plus midpoint rounded half-up. Throws EmptyMaskError.
VisualPromptSet derive_visual_prompts(const Mask& mask);

/// Coarse geometric vocabulary shared by templated answers and the mock client.
struct GeometryWords {
    std::string size, shape, location;
};
GeometryWords describe_geometry(const PixelRegion& bbox, int height, int width);
std::string summary_sentence(const std::string& organ, const GeometryWords& g);

struct ImageMeta {
    std::string subject;
    std::string slice;
    int height = 0, width = 0;
};

/// Schema text as committed in appearance.schema.json.
const std::string& appearance_schema_text();

/// Known template ids ("appearance_v1").
std::vector<std::string> template_ids();

/// Deterministic fill-in. Throws ConfigError for unknown templates.
std::string build_prompt(const std::string& template_id, const std::string& organ, const VisualPromptSet& prompts,
                         const ImageMeta& meta);

// ---------------------------------------------------------------------------
// Appearance descriptions
// ---------------------------------------------------------------------------

struct AppearanceDescription {
    std::string organ, shape, size, location, texture, boundary;
    std::vector<std::string> adjacency;
    std::string free_summary;

    std::string to_json() const;
    /// Assumes `raw` already passed validate_description.
    static AppearanceDescription from_json(const std::string& raw);
    bool operator==(const AppearanceDescription&) const = default;
};

struct Violation {
    std::string field;  ///< JSON pointer-ish path, "" for document-level problems
    std::string message;
    bool operator==(const Violation&) const = default;
};

/// Checks well-formedness, required fields, non-emptiness and field-name
/// exactness against the committed schema. Never throws.
std::vector<Violation> validate_description(const std::string& raw);

// ---------------------------------------------------------------------------
// Generation clients
// ---------------------------------------------------------------------------

class GenerationClient {
public:
    virtual ~GenerationClient() = default;
    /// Raw model output. Transport failures throw ClientError.
    virtual std::string generate(const std::string& prompt, const std::string& image_ref) = 0;
};

/// Deterministic offline stand-in: reads the organ and visual prompts back out
/// of the prompt and answers with a schema-conformant description.
class MockClient : public GenerationClient {
public:
    std::string generate(const std::string& prompt, const std::string& image_ref) override;
};

/// Replays a fixed list of outputs (the last one repeats). Thread-safe.
class ScriptedClient : public GenerationClient {
public:
    explicit ScriptedClient(std::vector<std::string> outputs) : outputs_(std::move(outputs)) {}
    std::string generate(const std::string& prompt, const std::string& image_ref) override;
    std::size_t calls() const;
    std::vector<std::string> prompts() const;

private:
    mutable std::mutex mu_;
    std::vector<std::string> outputs_;
    std::vector<std::string> prompts_;
    std::size_t next_ = 0;
};

struct HttpClientConfig {
    std::string endpoint;                      ///< e.g. http://localhost:8000/v1/generate
    std::string token_env = "CTREASON_LVLM_TOKEN";  ///< env var holding a bearer token (optional)
    double timeout_seconds = 60;
    int concurrency = 4;
};

/// POSTs {"prompt", "image_ref"} as JSON and expects {"output": "..."} back.
class HttpClient : public GenerationClient {
public:
    explicit HttpClient(HttpClientConfig cfg);
    std::string generate(const std::string& prompt, const std::string& image_ref) override;

private:
    HttpClientConfig cfg_;
    std::string scheme_host_port_;
    std::string path_;
};

struct GenerationOutcome {
    std::optional<AppearanceDescription> description;
    std::string raw_output;  ///< last raw output
    int retries = 0;         ///< re-prompts issued after the first attempt
    std::vector<Violation> violations;  ///< of the last attempt
    bool review_required() const { return !description.has_value(); }
};

/// Generates, validates and re-prompts with the violations appended up to
/// max_retries times. Transport errors propagate as ClientError.
GenerationOutcome generate_description(GenerationClient& client, const std::string& prompt,
                                       const std::string& image_ref, int max_retries = 2);

struct GenerationJob {
    std::string subject, slice, organ;
    std::string prompt;
    std::string image_ref;
    std::string mask_ref;  ///< mask PNG the visual prompts came from
};

struct JobResult {
    GenerationJob job;
    std::optional<GenerationOutcome> outcome;
    std::string error;  ///< message of a ClientError, when the job failed in transport
};

/// Runs jobs with at most `concurrency` in flight; results keep job order.
std::vector<JobResult> run_generation(GenerationClient& client, const std::vector<GenerationJob>& jobs,
                                      int concurrency, int max_retries = 2);

/// Writes descriptions/{subject}/{slice}/{organ}.json and appends to status.jsonl.
void write_outputs(const std::filesystem::path& out_dir, const std::vector<JobResult>& results);

}  // namespace ctreason::curation
