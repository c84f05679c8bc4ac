// Umbrella header.
#pragma once

#include "spexplus/tensor.hpp"
#include "spexplus/random.hpp"
#include "spexplus/tape.hpp"
#include "spexplus/ops.hpp"
#include "spexplus/layers.hpp"
#include "spexplus/model.hpp"
#include "spexplus/loss.hpp"
#include "spexplus/audio.hpp"
#include "spexplus/data.hpp"
#include "spexplus/checkpoint.hpp"
#include "spexplus/train.hpp"
#include "spexplus/eval.hpp"
#include "spexplus/gradcheck.hpp"
