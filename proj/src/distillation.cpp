#include "sit/distillation.hpp"

namespace sit {

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch},
       {"step", r.step},
       {"loss", r.loss},
       {"cls", r.cls},
       {"token", r.token},
       {"logits", r.logits},
       {"hard", r.hard},
       {"lr_backbone", r.lr_backbone},
       {"lr_recalib", r.lr_recalib},
       {"train_accuracy", r.train_accuracy},
       {"eval_accuracy", r.eval_accuracy},
       {"seconds", r.seconds}};
}

}  // namespace sit
