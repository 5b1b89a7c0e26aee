"""Two-branch masked autoencoder with a growing classifier.

The encoder's first transformer block is shared; its output feeds a main
branch (the remaining encoder blocks) and a detail branch (a token-wise
MLP). A fusion attention block combines the two token sequences for
classification, and a shared single-block decoder reconstructs images from
either branch. The detail branch's decoded image is high-pass filtered and
added to the main reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .frequency import freq_mask, ifft_to_real


@dataclass
class ModelConfig:
    image_side: int = 32
    patch_side: int = 4
    channels: int = 3
    embed_dim: int = 384
    encoder_blocks: int = 5
    decoder_blocks: int = 1
    heads: int = 12
    ffn_ratio: float = 2.0
    detailed_mlp_layers: int = 3
    detailed_mlp_hidden: int = 1536
    bilateral: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 for 2D sin-cos encodings")
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}")
        if self.image_side // self.patch_side >= 256:
            raise ValueError("patch grid side must fit one index byte (max 255)")
        if self.encoder_blocks < 2:
            raise ValueError("need at least a stem block plus one main-branch block")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels


@dataclass
class ForwardOutput:
    """Everything a training step needs from one bilateral pass."""

    z: torch.Tensor              # (B, D) fused embedding
    logits: torch.Tensor         # (B, classes)
    x_main: torch.Tensor         # (B, C, S, S) main-branch reconstruction
    x_hat: torch.Tensor          # (B, C, S, S) full reconstruction
    kept: torch.Tensor           # (B, N) kept flat patch indices
    pred_spectrum: torch.Tensor | None = None  # (B, C, S, S) complex, detail branch
    detail_img: torch.Tensor | None = None     # decoded detail image, pre-filter


def sincos_pos_embed(dim: int, grid_side: int) -> np.ndarray:
    """Fixed 2D sine-cosine positional table, shape (1 + grid^2, dim).

    Row 0 (the class-token slot) is zeros; patch rows follow the row-major
    grid order used by the patch codec.
    """
    coords = np.arange(grid_side, dtype=np.float64)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    emb = np.concatenate(
        [_sincos_1d(dim // 2, gy.reshape(-1)), _sincos_1d(dim // 2, gx.reshape(-1))], axis=1)
    return np.concatenate([np.zeros((1, dim)), emb], axis=0)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def torch_patchify(images: torch.Tensor, patch_side: int) -> torch.Tensor:
    """(B, C, S, S) -> (B, N_f, P*P*C), same layout as the numpy codec."""
    b, c, s, _ = images.shape
    g = s // patch_side
    x = images.reshape(b, c, g, patch_side, g, patch_side)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, g * g, patch_side * patch_side * c)


def torch_unpatchify(patches: torch.Tensor, patch_side: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`torch_patchify`."""
    b, n, _ = patches.shape
    g = int(round(n ** 0.5))
    x = patches.reshape(b, g, g, patch_side, patch_side, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, g * patch_side, g * patch_side)


def sample_batch_masks(batch: int, n_patches: int, mask_ratio: float,
                       rng: np.random.Generator) -> torch.Tensor:
    """Independent uniform kept-index sets for a batch, each sorted row-major.

    Returns a (batch, n_kept) long tensor with n_kept = floor(N_f * (1 - r)).
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    n_keep = int(np.floor(n_patches * (1.0 - mask_ratio)))
    scores = rng.random((batch, n_patches))
    kept = np.sort(np.argsort(scores, axis=1)[:, :n_keep], axis=1)
    return torch.from_numpy(kept.astype(np.int64))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            attn = attn.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, ffn_hidden)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class DetailMlp(nn.Module):
    """Token-wise MLP branch; the final layer starts at zero so the branch
    contributes nothing until trained."""

    def __init__(self, dim: int, hidden: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ValueError("detail branch needs at least one layer")
        if layers == 1:
            linears = [nn.Linear(dim, dim)]
        else:
            linears = [nn.Linear(dim, hidden)]
            linears += [nn.Linear(hidden, hidden) for _ in range(layers - 2)]
            linears.append(nn.Linear(hidden, dim))
        self.linears = nn.ModuleList(linears)
        self.act = nn.GELU()

    def forward(self, x):
        for layer in self.linears[:-1]:
            x = self.act(layer(x))
        return self.linears[-1](x)


class GrowingClassifier(nn.Module):
    """Linear head whose rows grow as classes arrive; old rows are preserved
    bit-exactly across growth."""

    def __init__(self, dim: int, n_classes: int = 0):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.zeros(n_classes, dim))
        self.bias = nn.Parameter(torch.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def grow(self, new_classes: int) -> None:
        if new_classes < 1:
            raise ValueError("must add at least one class")
        old_w, old_b = self.weight.data, self.bias.data
        weight = torch.zeros(self.n_classes + new_classes, self.dim,
                             dtype=old_w.dtype, device=old_w.device)
        bias = torch.zeros(self.n_classes + new_classes, dtype=old_b.dtype, device=old_b.device)
        weight[: self.n_classes] = old_w
        bias[: self.n_classes] = old_b
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(bias)

    def forward(self, z):
        if self.n_classes == 0:
            raise RuntimeError("classifier head is empty; grow it before use")
        return nn.functional.linear(z, self.weight, self.bias)


class BilateralMAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        ffn_hidden = int(d * config.ffn_ratio)

        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        pos = sincos_pos_embed(d, config.grid_side)[None]
        self.register_buffer("pos_embed", torch.from_numpy(pos).float(), persistent=False)

        self.encoder = nn.ModuleList(
            Block(d, config.heads, ffn_hidden) for _ in range(config.encoder_blocks))
        self.encoder_norm = nn.LayerNorm(d)

        if config.bilateral:
            self.detail = DetailMlp(d, config.detailed_mlp_hidden, config.detailed_mlp_layers)
            self.fusion = Block(d, config.heads, ffn_hidden)
            self.fusion_norm = nn.LayerNorm(d)
        else:
            self.detail = None
            self.fusion = None
            self.fusion_norm = None

        self.decoder = nn.ModuleList(
            Block(d, config.heads, ffn_hidden) for _ in range(config.decoder_blocks))
        self.decoder_norm = nn.LayerNorm(d)
        self.decoder_pred = nn.Linear(d, config.patch_dim)

        self.head = GrowingClassifier(d)

        self.apply(self._init_module)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        if self.detail is not None:
            nn.init.zeros_(self.detail.linears[-1].weight)
            nn.init.zeros_(self.detail.linears[-1].bias)

    @staticmethod
    def _init_module(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # --- token pipeline -------------------------------------------------

    def embed_and_mask(self, images: torch.Tensor, mask_ratio: float,
                       rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Patchify, embed, positionally encode, then keep a random subset.

        Returns (tokens, kept): tokens is (B, N+1, D) with the class token at
        position 0; kept is the (B, N) flat grid indices of surviving patches.
        Positional encodings are those of the original grid positions.
        """
        kept = sample_batch_masks(images.shape[0], self.config.n_patches, mask_ratio, rng)
        return self.embed_kept(
            torch_patchify(images, self.config.patch_side), kept.to(images.device)), kept

    def embed_kept(self, patches: torch.Tensor, kept: torch.Tensor = None) -> torch.Tensor:
        """Embed patch rows (optionally pre-selected by ``kept``) and prepend
        the class token."""
        b = patches.shape[0]
        pos = self.pos_embed.to(patches.dtype)
        x = self.patch_embed(patches)
        if kept is not None and patches.shape[1] == self.config.n_patches:
            x = x + pos[:, 1:, :]
            x = torch.gather(x, 1, kept[..., None].expand(-1, -1, x.shape[-1]))
        elif kept is not None:
            x = x + pos[:, 1:, :].expand(b, -1, -1).gather(
                1, kept[..., None].expand(-1, -1, x.shape[-1]))
        else:
            x = x + pos[:, 1:, :]
        cls = (self.cls_token + pos[:, :1, :]).to(patches.dtype).expand(b, -1, -1)
        return torch.cat([cls, x], dim=1)

    def shared_stem(self, tokens: torch.Tensor) -> torch.Tensor:
        """First encoder block; both branches consume its output."""
        return self.encoder[0](tokens)

    def main_branch(self, f: torch.Tensor) -> torch.Tensor:
        """Remaining encoder blocks plus the final norm."""
        x = f
        for block in list(self.encoder)[1:]:
            x = block(x)
        return self.encoder_norm(x)

    def detailed_branch(self, f: torch.Tensor) -> torch.Tensor:
        if self.detail is None:
            raise RuntimeError("model was built with bilateral=False")
        return self.detail(f)

    def fuse_embeddings(self, main: torch.Tensor, detail: torch.Tensor,
                        mask_detail: bool = False) -> torch.Tensor:
        """One attention block over [main tokens; detail tokens]; returns the
        class-token embedding of the main sequence.

        ``mask_detail`` blocks attention to the detail tokens (diagnostic
        hook used to check the degenerate-input contract).
        """
        if main.shape != detail.shape:
            raise ValueError(f"shape mismatch: {tuple(main.shape)} vs {tuple(detail.shape)}")
        tokens = torch.cat([main, detail], dim=1)
        key_mask = None
        if mask_detail:
            key_mask = torch.zeros(tokens.shape[:2], dtype=torch.bool, device=tokens.device)
            key_mask[:, : main.shape[1]] = True
        fused = self.fusion(tokens, key_mask=key_mask)
        return self.fusion_norm(fused[:, 0])

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z)

    def grow_head(self, new_classes: int) -> None:
        self.head.grow(new_classes)

    def decode(self, tokens: torch.Tensor, kept: torch.Tensor) -> torch.Tensor:
        """Insert mask tokens at masked grid positions, re-add positional
        encodings, run the decoder, and project back to pixels."""
        b, n_plus_1, d = tokens.shape
        if kept.shape != (b, n_plus_1 - 1):
            raise ValueError(
                f"kept indices {tuple(kept.shape)} do not match sequence {tuple(tokens.shape)}")
        kept = kept.to(tokens.device)
        full = self.mask_token.to(tokens.dtype).expand(b, self.config.n_patches, d).clone()
        full = full.scatter(1, kept[..., None].expand(-1, -1, d), tokens[:, 1:, :])
        seq = torch.cat([tokens[:, :1, :], full], dim=1) + self.pos_embed.to(tokens.dtype)
        for block in self.decoder:
            seq = block(seq)
        seq = self.decoder_norm(seq)
        pixels = self.decoder_pred(seq[:, 1:, :])
        return torch_unpatchify(pixels, self.config.patch_side, self.config.channels)

    # --- full passes ----------------------------------------------------

    def forward_train(self, images: torch.Tensor, mask_ratio: float,
                      rng: np.random.Generator, cutoff_fraction: float) -> ForwardOutput:
        """One full bilateral pass: fused classification plus both image-level
        reconstructions."""
        tokens, kept = self.embed_and_mask(images, mask_ratio, rng)
        f = self.shared_stem(tokens)
        main = self.main_branch(f)
        x_main = self.decode(main, kept)
        if self.config.bilateral:
            detail = self.detailed_branch(f)
            z = self.fuse_embeddings(main, detail)
            detail_img = self.decode(detail, kept)
            pred_spectrum = freq_mask(detail_img, cutoff_fraction)
            x_hat = x_main + ifft_to_real(pred_spectrum, check=False)
        else:
            detail_img = None
            pred_spectrum = None
            z = main[:, 0]
            x_hat = x_main
        logits = self.classify(z)
        return ForwardOutput(z=z, logits=logits, x_main=x_main, x_hat=x_hat, kept=kept,
                             pred_spectrum=pred_spectrum, detail_img=detail_img)

    def forward_eval(self, images: torch.Tensor) -> torch.Tensor:
        """Classification logits from the unmasked image (evaluation protocol)."""
        b = images.shape[0]
        kept = torch.arange(self.config.n_patches, device=images.device).expand(b, -1)
        tokens = self.embed_kept(torch_patchify(images, self.config.patch_side), kept)
        f = self.shared_stem(tokens)
        main = self.main_branch(f)
        if self.config.bilateral:
            z = self.fuse_embeddings(main, self.detailed_branch(f))
        else:
            z = main[:, 0]
        return self.classify(z)

    @torch.no_grad()
    def embed_features(self, images: torch.Tensor) -> torch.Tensor:
        """Fused embedding z of unmasked inputs (used for feature-density metrics)."""
        b = images.shape[0]
        kept = torch.arange(self.config.n_patches, device=images.device).expand(b, -1)
        tokens = self.embed_kept(torch_patchify(images, self.config.patch_side), kept)
        f = self.shared_stem(tokens)
        main = self.main_branch(f)
        if self.config.bilateral:
            return self.fuse_embeddings(main, self.detailed_branch(f))
        return main[:, 0]

    @torch.no_grad()
    def mask_and_reconstruct(self, images: torch.Tensor, r1: float, r2: float,
                             rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Two main-branch reconstructions under independent masks of ratios
        r1 (coarse) and r2 (fine); detached, computed in eval mode."""
        was_training = self.training
        self.eval()
        try:
            outs = []
            for ratio in (r1, r2):
                tokens, kept = self.embed_and_mask(images, ratio, rng)
                main = self.main_branch(self.shared_stem(tokens))
                outs.append(self.decode(main, kept))
        finally:
            self.train(was_training)
        return outs[0], outs[1]

    @torch.no_grad()
    def reconstruct_from_patches(self, patches: torch.Tensor, kept: torch.Tensor,
                                 cutoff_fraction: float) -> torch.Tensor:
        """Full-image reconstruction from stored patch pixels at ``kept``
        positions (no further masking), clamped to [0, 1]."""
        tokens = self.embed_kept(patches, kept)
        f = self.shared_stem(tokens)
        main = self.main_branch(f)
        x_hat = self.decode(main, kept)
        if self.config.bilateral:
            detail_img = self.decode(self.detailed_branch(f), kept)
            x_hat = x_hat + ifft_to_real(freq_mask(detail_img, cutoff_fraction), check=False)
        return x_hat.clamp(0.0, 1.0)
