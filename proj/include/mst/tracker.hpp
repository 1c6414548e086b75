#pragma once

#include <string>
#include <vector>

#include "mst/head.hpp"
#include "mst/image.hpp"
#include "mst/model.hpp"
#include "mst/synthetic.hpp"

namespace mst {

// Streaming single-object tracker with a fixed first-frame template.
class Tracker {
 public:
  explicit Tracker(MstModel& model) : model_(model) {}

  void init(const Image& frame, const BoxXYWH& box) {
    if (!box.valid()) throw InputError("tracker init box is not a valid box: " + box.to_line());
    const auto& c = model_.config;
    template_ = normalize_image(template_crop(frame, box, c.template_factor, c.template_size).image);
    state_ = box;
    ready_ = true;
  }

  BoxXYWH update(const Image& frame) {
    if (!ready_) throw InputError("tracker used before init");
    const auto& c = model_.config;
    const CropWindow win = context_window(clamp_box(state_, frame.width, frame.height), c.search_factor, c.search_size);
    const Tensor search = normalize_image(crop_window(frame, win));
    Tape tape;
    auto fwd = model_.forward(tape, template_, search, BnMode::Running);
    HeadMaps maps = to_maps(fwd.head);
    last_score_ = hanning_rescore(maps.score, c.hanning_weight);
    const BoxXYWH in_crop = decode_at(maps, argmax_cell(last_score_), static_cast<double>(c.search_size));
    state_ = clamp_box(win.to_frame(in_crop), frame.width, frame.height);
    return state_;
  }

  const BoxXYWH& state() const { return state_; }
  const Tensor& last_score() const { return last_score_; }

 private:
  MstModel& model_;
  Tensor template_;
  BoxXYWH state_;
  Tensor last_score_;
  bool ready_ = false;
};

// Frame t is read only when its prediction is made.
inline std::vector<BoxXYWH> track_sequence(MstModel& model, const SequenceDir& seq, const BoxXYWH& init_box) {
  Tracker tracker(model);
  std::vector<BoxXYWH> out;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const Image frame = read_ppm(seq.frames[t]);
    if (t == 0) {
      tracker.init(frame, init_box);
      out.push_back(init_box);
    } else {
      out.push_back(tracker.update(frame));
    }
  }
  return out;
}

inline std::vector<BoxXYWH> track_sequence(MstModel& model, const SequenceDir& seq) {
  if (!seq.has_gt() || seq.gt.front().absent) throw InputError("sequence " + seq.path + " has no initial box");
  return track_sequence(model, seq, seq.gt.front().box);
}

}  // namespace mst
