#pragma once

// Everything: tensors and autodiff, backbone, patches, objectives, corpus,
// experiment runner, checkpoints, run config and plotting.

#include "peterrec/adapters.hpp"
#include "peterrec/checkpoint.hpp"
#include "peterrec/config.hpp"
#include "peterrec/corpus.hpp"
#include "peterrec/evalbench.hpp"
#include "peterrec/plot.hpp"
