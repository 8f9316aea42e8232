#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctreason/image.hpp"

namespace ctreason::data {

/// Which perception heads an object's answer routes to.
enum class Task { seg, det, both };

std::string task_name(Task t);
bool wants_seg(Task t);
bool wants_det(Task t);

struct ObjectAnnotation {
    std::string organ;
    std::string query;
    std::string answer;               ///< includes routing tokens
    Mask mask;                        ///< same shape as the slice
    std::vector<PixelRegion> boxes;   ///< inclusive pixel corners, one per instance
    std::string mask_file;            ///< relative to the slice directory
    Task task = Task::seg;
};

struct MultimodalSample {
    std::string subject;
    std::string slice_id;        ///< directory name, e.g. "slice_007"
    int slice_index = 0;
    Grid<std::uint16_t> raw;     ///< stored 16-bit intensities
    ImageGrid image;             ///< windowed to [0,1]
    std::vector<ObjectAnnotation> objects;
};

/// Infers the task from routing tokens present in an answer string.
Task task_from_answer(const std::string& answer);

/// Checks sample invariants (mask shapes, routing tokens, boxes for [det]). Throws ShapeError / ConfigError.
void validate(const MultimodalSample& s);

// On-disk layout:
//   root/{subject}/{slice_id}/image.png        16-bit grayscale
//   root/{subject}/{slice_id}/mask_{organ}.png 8-bit label (0/255)
//   root/{subject}/{slice_id}/sample.json
//   root/{train,val,test}.txt                  subject ids, one per line

void save_sample(const std::filesystem::path& root, const MultimodalSample& s);
MultimodalSample load_sample(const std::filesystem::path& slice_dir);

/// All slices of one subject, ordered by slice index.
std::vector<MultimodalSample> load_subject(const std::filesystem::path& root, const std::string& subject);

void write_split(const std::filesystem::path& root, const std::string& split, const std::vector<std::string>& subjects);
std::vector<std::string> read_split(const std::filesystem::path& root, const std::string& split);
std::vector<MultimodalSample> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace ctreason::data
