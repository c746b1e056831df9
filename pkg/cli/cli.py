"""
Module principal de la ligne de commande (CLI) du projet dproto :
classifieur à prototypes déformables et explications par masques
dynamiques multiples.

Ce module permet, via des sous-commandes, de :

- générer un jeu d'images synthétiques avec vérité terrain (``gen-data``) ;
- convertir un dossier d'images classées en jeu de données (``ingest``) ;
- entraîner un modèle et écrire son point de contrôle (``train``) ;
- expliquer la décision du modèle sur une image (``explain``) ;
- évaluer les cartes de saillance sur la partition de test (``eval``) ;
- vérifier les dénombrements de prototypes rectangulaires (``verify``).

Codes de sortie : 0 succès, 2 usage ou configuration, 3 données,
4 divergence numérique, 1 erreur inattendue.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

# Ajout du dossier parent dans le chemin d'import pour permettre
# l'import du package dproto lorsque le script est exécuté directement.
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dproto import checkpoint  # noqa: E402
from dproto.config import RunConfig, resolve_threads  # noqa: E402
from dproto.dataset import SyntheticSpec, generate, ingest_folder, load_manifest  # noqa: E402
from dproto.errors import (  # noqa: E402
    DataError,
    DivergenceError,
    ExpressivenessMismatchError,
    NonFiniteError,
)
from dproto.imageio import read_image  # noqa: E402
from dproto.mdm import explain  # noqa: E402
from dproto.model import ProtoModel  # noqa: E402
from dproto.protolayer import count_rect_patch_prototypes, count_unit_patch_prototypes  # noqa: E402
from dproto.saliency_eval import evaluate_methods  # noqa: E402
from dproto.trainer import LabeledImages, train, write_epoch_log  # noqa: E402

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CHECKPOINT_NAME = "checkpoint.dproto"


def banner(title):
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}\n")


# -----------------------------------------------------
#  GÉNÉRATION ET INGESTION
# -----------------------------------------------------
def cmd_gen_data(args):
    """
    Génère le jeu synthétique et affiche la répartition train/test.

    Returns:
        int: Code de sortie.
    """
    banner(f"Génération du jeu synthétique : {args.out}")
    spec = SyntheticSpec(args.classes, args.per_class, args.size, args.clutter, args.noise,
                         args.seed, args.test_fraction)
    manifest = generate(spec, args.out, force=args.force, threads=resolve_threads(args.threads))
    print(f"  - Classes  : {', '.join(manifest.class_names)}")
    print(f"  - Images   : {len(manifest)}")
    print(f"  - Train    : {len(manifest.split('train'))}")
    print(f"  - Test     : {len(manifest.split('test'))}")
    print(f"\n Manifeste écrit : {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_ingest(args):
    banner(f"Ingestion du dossier : {args.root}")
    manifest = ingest_folder(args.root, args.out, args.size, args.test_fraction, args.seed, args.force)
    print(f"  - Classes  : {', '.join(manifest.class_names)}")
    print(f"  - Images   : {len(manifest)}")
    print(f"  - Masques  : {sum(1 for e in manifest if e.mask is not None)}")
    print(f"\n Manifeste écrit : {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


# -----------------------------------------------------
#  ENTRAÎNEMENT
# -----------------------------------------------------
def _train_config(args, manifest):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    trainer = cfg.trainer if args.epochs is None else replace(cfg.trainer, epochs=args.epochs)
    protolayer = replace(cfg.protolayer, num_classes=len(manifest.class_names))
    backbone = replace(cfg.backbone, input_size=tuple(manifest.image_size))
    return cfg.with_overrides(
        trainer=trainer,
        protolayer=protolayer,
        backbone=backbone,
        seed=cfg.seed if args.seed is None else args.seed,
        threads=resolve_threads(args.threads),
    )


def cmd_train(args):
    """
    Entraîne un modèle sur la partition ``train`` du manifeste.

    Écrit dans ``--out`` : le point de contrôle, ``epochs.csv``,
    ``metrics.json`` et la configuration effective ``config.json``.
    """
    banner(f"Entraînement : {args.data}")
    manifest = load_manifest(args.data)
    cfg = _train_config(args, manifest)
    train_data = LabeledImages.from_manifest(manifest, "train")
    test_data = LabeledImages.from_manifest(manifest, "test")
    print(f"  - Train    : {len(train_data)} image(s)")
    print(f"  - Test     : {len(test_data)} image(s)")
    print(f"  - Époques  : {cfg.trainer.epochs} (échauffement {cfg.trainer.warmup_epochs})")
    print(f"  - Graine   : {cfg.seed}\n")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ProtoModel.build(cfg, manifest.class_names)

    def report(entry):
        push = "  [projection]" if entry.pushed else ""
        print(f"  Époque {entry.epoch:3d} | perte {entry.total:8.4f} | "
              f"train {entry.train_acc:.3f} | test {entry.test_acc:.3f}{push}")

    result = train(model, train_data, cfg, test_data, on_epoch=report)
    checkpoint.save(result.model, out / CHECKPOINT_NAME)
    write_epoch_log(result.log, out / "epochs.csv")
    cfg.save(out / "config.json")
    metrics = {
        "epochs": cfg.trainer.epochs,
        "train_accuracy": result.model.accuracy(train_data.images, train_data.labels),
        "test_accuracy": result.model.accuracy(test_data.images, test_data.labels) if len(test_data) else None,
        "pushes": [{"epoch": p.epoch, "accuracy_before": p.accuracy_before,
                    "accuracy_after_push": p.accuracy_after_push,
                    "accuracy_after_refit": p.accuracy_after_refit} for p in result.pushes],
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"\n Précision finale : train {metrics['train_accuracy']:.3f}"
          + (f", test {metrics['test_accuracy']:.3f}" if metrics["test_accuracy"] is not None else ""))
    print(f" Point de contrôle : {out / CHECKPOINT_NAME}")
    return EXIT_OK


# -----------------------------------------------------
#  EXPLICATION
# -----------------------------------------------------
def cmd_explain(args):
    banner(f"Explication de : {args.image}")
    model = checkpoint.load(args.checkpoint)
    cfg = model.cfg.mdm if args.steps is None else replace(model.cfg.mdm, steps=args.steps)
    image = read_image(args.image, mode="RGB")
    bundle = explain(model, image, cfg, threads=resolve_threads(args.threads))
    bundle.save(args.out)
    node = bundle.image_side.node
    print(f"  - Classe prédite : {model.class_names[bundle.predicted_class]}")
    print(f"  - Prototype      : {node.prototype_id} (masque {node.mask_index})")
    print(f"  - Pixels retenus : {int(bundle.cam_x.support.sum())}")
    if bundle.prototype_side is None:
        print("\n Attention : prototype sans provenance, explication limitée à l'image.")
    print(f"\n Fichiers écrits dans : {args.out}")
    return EXIT_OK


# -----------------------------------------------------
#  ÉVALUATION
# -----------------------------------------------------
def cmd_eval(args):
    banner(f"Évaluation : {args.checkpoint}")
    model = checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.data)
    cfg = model.cfg
    mdm = cfg.mdm if args.steps is None else replace(cfg.mdm, steps=args.steps)
    evc = cfg.eval if args.top_percent is None else replace(cfg.eval, top_percent=args.top_percent)
    cfg = replace(cfg, mdm=mdm, eval=evc)
    cfg.validate()

    test = manifest.split("test")
    if not test:
        raise ValueError("La partition de test est vide : rien à évaluer")
    images, labels, _ = manifest.arrays("test")
    accuracy = model.accuracy(images, labels)
    with_truth = [(i, e) for i, e in enumerate(test) if e.mask is not None]
    if args.limit is not None:
        with_truth = with_truth[:args.limit]
    if not with_truth:
        raise ValueError("Aucune image de test n'a de vérité terrain")
    indices = [i for i, _ in with_truth]
    truths = [manifest.load_mask(e) for _, e in with_truth]
    print(f"  - Précision (test)   : {accuracy:.3f} sur {len(test)} image(s)")
    print(f"  - Images expliquées  : {len(indices)}")
    print(f"  - Seuil              : top {cfg.eval.top_percent:g} %\n")

    report = evaluate_methods(model, images[indices], labels[indices], truths, cfg,
                              threads=resolve_threads(args.threads), accuracy=accuracy)
    report.save(args.out)
    print(f"  {'méthode':<10} {'IOU':>7} {'DICE':>7} {'AD':>7} {'AI':>7} {'ins.':>7} {'sup.':>7}")
    for method, m in report.metrics.items():
        print(f"  {method:<10} {m['iou']:7.3f} {m['dice']:7.3f} {m['AD']:7.2f} {m['AI']:7.2f} "
              f"{m['insertion_auc']:7.3f} {m['deletion_auc']:7.3f}")
    print(f"\n Résultats écrits dans : {args.out}")
    return EXIT_OK


# -----------------------------------------------------
#  VÉRIFICATION DES DÉNOMBREMENTS
# -----------------------------------------------------
def cmd_verify(args):
    """
    Affiche, pour chaque grille jusqu'à ``--max-grid``, le nombre de
    prototypes à patch unitaire et à patch rectangulaire (formule et énumération).
    Une divergence lève :class:`ExpressivenessMismatchError` (code 4).
    """
    banner(f"Dénombrement des prototypes (grilles jusqu'à {args.max_grid}x{args.max_grid})")
    print(f"  {'grille':<8} {'|Z_P|':>6} {'formule':>9} {'énumération':>12}")
    for h in range(1, args.max_grid + 1):
        for w in range(1, args.max_grid + 1):
            if h * w < 2:
                continue
            counts = count_rect_patch_prototypes(h, w)
            print(f"  {f'{h}x{w}':<8} {count_unit_patch_prototypes(h, w):>6} "
                  f"{counts.closed_form:>9} {counts.enumerated:>12}")
    print("\n Formule fermée et énumération concordent.")
    return EXIT_OK


# -----------------------------------------------------
#  PARSING DES ARGUMENTS
# -----------------------------------------------------
def build_parser():
    """
    Construit l'analyseur de la ligne de commande.

    Returns:
        argparse.ArgumentParser: Analyseur avec une sous-commande par opération.
    """
    parser = argparse.ArgumentParser(
        description="Classifieur à prototypes et explications par masques dynamiques",
        epilog=(
            "Exemples:\n"
            "  python3 cli/cli.py gen-data --out data --classes 4 --per-class 200\n"
            "  python3 cli/cli.py train --data data --out run\n"
            "  python3 cli/cli.py explain --checkpoint run/checkpoint.dproto --image data/images/00000.ppm --out expl\n"
            "  python3 cli/cli.py eval --checkpoint run/checkpoint.dproto --data data --out eval\n"
            "  python3 cli/cli.py verify --max-grid 7"
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="Journalisation détaillée (-v : INFO, -vv : DEBUG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Générer le jeu synthétique")
    p.add_argument("--out", required=True, help="Dossier de sortie")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=200)
    p.add_argument("--size", type=int, default=56)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--clutter", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--force", action="store_true", help="Écrire dans un dossier non vide")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="Convertir un dossier d'images classées")
    p.add_argument("--root", required=True, help="Dossier racine (un sous-dossier par classe)")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=56)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="Entraîner un modèle")
    p.add_argument("--data", required=True, help="manifest.json ou son dossier")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="Configuration JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="Expliquer une image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="Itérations par échelle")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="Évaluer les cartes de saillance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-percent", dest="top_percent", type=float)
    p.add_argument("--limit", type=int, help="Nombre maximal d'images expliquées")
    p.add_argument("--steps", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="Vérifier les dénombrements de prototypes")
    p.add_argument("--max-grid", dest="max_grid", type=int, default=7)
    p.set_defaults(func=cmd_verify)
    return parser


def configure_logging(verbosity):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s : %(message)s")


# -----------------------------------------------------
#  MAIN
# -----------------------------------------------------
def main(argv=None):
    """
    Point d'entrée principal : analyse les arguments, délègue à la
    sous-commande et traduit les exceptions en codes de sortie.

    Returns:
        int: Code de sortie.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\n  Programme interrompu par l'utilisateur.")
        return EXIT_OK
    except DataError as e:
        print(f" Erreur de données : {e}")
        return EXIT_DATA
    except (DivergenceError, NonFiniteError, ExpressivenessMismatchError) as e:
        print(f" Erreur numérique : {e}")
        return EXIT_NUMERIC
    except ValueError as e:
        print(f" Erreur : {e}")
        return EXIT_USAGE
    except Exception as e:
        print(f"\n Erreur inattendue : {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
