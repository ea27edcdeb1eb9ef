#pragma once

#include "lorafuse/backbone.hpp"
#include "lorafuse/common.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/data.hpp"
#include "lorafuse/grid.hpp"
#include "lorafuse/lora.hpp"
#include "lorafuse/merge.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/multitask.hpp"
#include "lorafuse/tensor.hpp"
#include "lorafuse/trainer.hpp"
