"""
Django form validating a flattened pipeline configuration.
"""
from django import forms

from .adversarial import DM_FORMS
from .backbone import IBN_STAGE_CHOICES, PRESETS
from .scorers import ARCHITECTURES

ARCH_CHOICES = [(arch, arch) for arch in ARCHITECTURES]


def _parse_list(value, cast, name):
    """Accept a JSON list or a comma-separated string such as '1,2,3,6'."""
    if value in (None, ''):
        return []
    if isinstance(value, str):
        items = [item.strip() for item in value.strip('[]() ').split(',') if item.strip()]
    elif isinstance(value, (list, tuple)):
        items = list(value)
    else:
        raise forms.ValidationError(f'{name} must be a list.')
    try:
        return [cast(item) for item in items]
    except (TypeError, ValueError):
        raise forms.ValidationError(f'{name} has a malformed entry: {value!r}.')


def _probability(**kwargs):
    return forms.FloatField(min_value=0.0, max_value=1.0, **kwargs)


class PipelineConfigForm(forms.Form):
    """
    Every field of PipelineConfig under its flattened `<section>_<key>` name.
    Open interval bounds are re-checked by the config dataclasses.
    """

    # Thresholds and loss weights
    R = forms.FloatField(min_value=0.0, max_value=255.0)
    tau = _probability()
    T = _probability()
    epsilon = _probability()
    S = _probability()
    key_threshold = _probability()
    alpha_e = forms.FloatField(min_value=0.0)
    alpha_d = forms.FloatField(min_value=0.0)
    alpha_m = forms.FloatField(min_value=0.0)
    seed = forms.IntegerField(min_value=0)
    seg_samples = forms.IntegerField(min_value=2)

    # Tiling
    tile_patch_size = forms.IntegerField(min_value=1)
    tile_stride = forms.IntegerField(min_value=1)

    # Segmentation backbone
    backbone_encoder_depth_preset = forms.ChoiceField(choices=[(p, p) for p in PRESETS])
    backbone_ibn_stages = forms.Field(required=False)
    backbone_atrous = forms.BooleanField(required=False)
    backbone_atrous_rates = forms.Field()
    backbone_ppm = forms.BooleanField(required=False)
    backbone_ppm_scales = forms.Field()
    backbone_scse = forms.BooleanField(required=False)
    backbone_hypercolumn = forms.BooleanField(required=False)
    backbone_input_size = forms.IntegerField(min_value=32)

    # Adversarial schedule
    schedule_s0 = forms.IntegerField(min_value=0)
    schedule_d0 = forms.IntegerField(min_value=0)
    schedule_alt_epochs = forms.IntegerField(min_value=0)
    schedule_steps_per_phase = forms.IntegerField(min_value=1, required=False)

    # Stage-1 classifier
    stage1_arch = forms.ChoiceField(choices=ARCH_CHOICES)
    stage1_input_size = forms.IntegerField(min_value=16)
    stage1_width = forms.IntegerField(min_value=8)
    stage1_epochs = forms.IntegerField(min_value=0)
    stage1_lr = forms.FloatField(min_value=0.0)
    stage1_momentum = forms.FloatField(min_value=0.0, max_value=1.0)
    stage1_weight_decay = forms.FloatField(min_value=0.0)
    stage1_batch_size = forms.IntegerField(min_value=2)
    stage1_samples = forms.IntegerField(min_value=2)
    stage1_augment = forms.BooleanField(required=False)

    # Stage-2 ensemble
    stage2_archs = forms.Field()
    stage2_holdout = forms.FloatField(min_value=0.0, max_value=0.9)
    stage2_input_size = forms.IntegerField(min_value=16)
    stage2_width = forms.IntegerField(min_value=8)
    stage2_epochs = forms.IntegerField(min_value=0)
    stage2_lr = forms.FloatField(min_value=0.0)
    stage2_batch_size = forms.IntegerField(min_value=2)
    stage2_samples = forms.IntegerField(min_value=2)
    stage2_augment = forms.BooleanField(required=False)

    # Segmentation training
    segmentation_batch_size = forms.IntegerField(min_value=1)
    segmentation_lr = forms.FloatField(min_value=0.0)
    segmentation_betas = forms.Field()
    segmentation_weight_decay = forms.FloatField(min_value=0.0)
    segmentation_disc_lr = forms.FloatField(min_value=0.0)
    segmentation_disc_width = forms.IntegerField(min_value=1)
    segmentation_dm_adv_form = forms.ChoiceField(choices=[(f, f) for f in DM_FORMS])
    segmentation_lookahead_k = forms.IntegerField(min_value=1)
    segmentation_lookahead_alpha = _probability()

    # Augmentation
    augment_fold_aug = forms.BooleanField(required=False)
    augment_p_flip = _probability()
    augment_p_brightness_contrast = _probability()
    augment_p_grid_distortion = _probability()
    augment_contrast_range = forms.Field()
    augment_brightness_range = forms.Field()
    augment_grid_nodes = forms.IntegerField(min_value=2)
    augment_grid_max_shift = _probability()

    def clean_backbone_ibn_stages(self):
        stages = _parse_list(self.cleaned_data.get('backbone_ibn_stages'), int, 'ibn_stages')
        invalid = [s for s in stages if s not in IBN_STAGE_CHOICES]
        if invalid:
            raise forms.ValidationError(f'IBN can only be placed in stages {IBN_STAGE_CHOICES}, got {invalid}.')
        return tuple(sorted(set(stages)))

    def clean_backbone_atrous_rates(self):
        rates = _parse_list(self.cleaned_data.get('backbone_atrous_rates'), int, 'atrous_rates')
        if len(rates) != 2 or min(rates) < 1:
            raise forms.ValidationError('Atrous rates must be two positive integers.')
        return tuple(rates)

    def clean_backbone_ppm_scales(self):
        scales = _parse_list(self.cleaned_data.get('backbone_ppm_scales'), int, 'ppm_scales')
        if not scales or min(scales) < 1 or any(a >= b for a, b in zip(scales, scales[1:])):
            raise forms.ValidationError('PPM scales must be strictly increasing positive integers.')
        return tuple(scales)

    def clean_backbone_input_size(self):
        size = self.cleaned_data.get('backbone_input_size')
        if size is not None and size % 32:
            raise forms.ValidationError('Input size must be a multiple of 32.')
        return size

    def clean_stage2_archs(self):
        archs = _parse_list(self.cleaned_data.get('stage2_archs'), str, 'archs')
        unknown = [a for a in archs if a not in ARCHITECTURES]
        if not archs or unknown:
            raise forms.ValidationError(f'Ensemble architectures must be chosen from {ARCHITECTURES}.')
        return tuple(archs)

    def clean_segmentation_betas(self):
        betas = _parse_list(self.cleaned_data.get('segmentation_betas'), float, 'betas')
        if len(betas) != 2 or not all(0 <= b < 1 for b in betas):
            raise forms.ValidationError('Betas must be two values in [0, 1).')
        return tuple(betas)

    def clean_augment_contrast_range(self):
        low, high = self._range('augment_contrast_range')
        if low <= 0:
            raise forms.ValidationError('Contrast factors must be positive.')
        return (low, high)

    def clean_augment_brightness_range(self):
        return self._range('augment_brightness_range')

    def _range(self, name):
        bounds = _parse_list(self.cleaned_data.get(name), float, name)
        if len(bounds) != 2 or bounds[0] > bounds[1]:
            raise forms.ValidationError('A range needs two ordered values.')
        return tuple(bounds)

    def clean(self):
        cleaned_data = super().clean()
        patch_size = cleaned_data.get('tile_patch_size')
        stride = cleaned_data.get('tile_stride')
        if patch_size and stride and stride > patch_size:
            self.add_error('tile_stride', 'Stride cannot exceed the patch size.')
        for name in ('tau', 'T'):
            value = cleaned_data.get(name)
            if value is not None and value <= 0:
                self.add_error(name, f'{name} must be strictly positive.')
        if cleaned_data.get('tau') == 1.0:
            self.add_error('tau', 'tau must be below 1.')
        for name in ('S', 'epsilon'):
            if cleaned_data.get(name) == 1.0:
                self.add_error(name, f'{name} must be below 1.')
        return cleaned_data
