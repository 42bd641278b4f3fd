#include "mixseg.h"

#include <stdio.h>

int main(void) {
    uint8_t bits[6] = {0, 1, 1, 0, 1, 1};
    MixsegMask *mask = NULL;
    if (mixseg_mask_from_bits(2, 3, bits, &mask) != MIXSEG_STATUS_OK) {
        fprintf(stderr, "%s\n", mixseg_last_error());
        return 1;
    }
    uint64_t area = 0;
    mixseg_mask_area(mask, &area);

    MixsegFusionInput *input = NULL;
    mixseg_fusion_input_new(2, 3, &input);
    mixseg_fusion_input_add(input, mask, 1, true, 0.9, 0.05);
    MixsegPanopticMap *map = NULL;
    MixsegStatus st = mixseg_fuse(input, MIXSEG_ALGORITHM_ESF_OMI, NULL, &map);

    MixsegCategory cats[1] = {{1, true}};
    MixsegPq pq;
    mixseg_panoptic_quality(map, map, cats, 1, &pq);

    mixseg_panoptic_map_free(map);
    mixseg_fusion_input_free(input);
    mixseg_mask_free(mask);
    return st == MIXSEG_STATUS_OK && area == 4 && pq.pq == 1.0 ? 0 : 1;
}
