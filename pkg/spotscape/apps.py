from django.apps import AppConfig

MODULE_NAME = "spotscape"

DEFAULT_CFG = {
    # Mode d'entraînement et optimisation
    "mode": "single",
    "epochs": 1000,
    "learning_rate": 0.0001,
    "weight_decay": 0.0001,
    "seed": 0,
    "threads": 1,
    "checkpoint_every": 100,

    # Prétraitement
    "hvg_n": 5000,
    "target_sum": 10000.0,

    # Graphe SNN et augmentations
    "snn_k": 6,
    "feature_mask_rate_1": 0.2,
    "feature_mask_rate_2": 0.2,
    "edge_mask_rate_1": 0.2,
    "edge_mask_rate_2": 0.2,
    "mask_mode": "column",

    # Architecture encodeur / décodeur
    "encoder_dims": [256, 64],
    "decoder_hidden": 256,
    "final_activation": "relu",

    # Pondération des pertes
    "lambda_sc": 1.0,
    "lambda_recon": 0.1,
    "lambda_pcl": 0.01,
    "lambda_ss": 1.0,
    "tau": 0.75,
    "top_k": 5,
    "warmup_epochs": 500,
    "pcl_granularities": [1.0, 1.5, 2.0],
    "pcl_refresh_every": 1,
    "ss_include_self": True,
    "single_pcl": False,

    # Évaluation et recherche du taux d'apprentissage
    "n_clusters": 7,
    "kmeans_restarts": 10,
    "lr_grid": [0.00001, 0.00005, 0.0001, 0.0005, 0.001],
    "lr_search_criterion": "silhouette",

    # Entrées / sorties
    "inputs": [],
    "out": "",
    "write_imputed": False,
}


class SpotscapeConfig(AppConfig):
    name = MODULE_NAME
    verbose_name = "Spotscape"
    default_auto_field = "django.db.models.BigAutoField"

    # Valeurs effectives, surchargeables via settings.SPOTSCAPE
    mode = DEFAULT_CFG["mode"]
    epochs = DEFAULT_CFG["epochs"]
    learning_rate = DEFAULT_CFG["learning_rate"]
    weight_decay = DEFAULT_CFG["weight_decay"]
    seed = DEFAULT_CFG["seed"]
    threads = DEFAULT_CFG["threads"]
    checkpoint_every = DEFAULT_CFG["checkpoint_every"]

    hvg_n = DEFAULT_CFG["hvg_n"]
    target_sum = DEFAULT_CFG["target_sum"]

    snn_k = DEFAULT_CFG["snn_k"]
    feature_mask_rate_1 = DEFAULT_CFG["feature_mask_rate_1"]
    feature_mask_rate_2 = DEFAULT_CFG["feature_mask_rate_2"]
    edge_mask_rate_1 = DEFAULT_CFG["edge_mask_rate_1"]
    edge_mask_rate_2 = DEFAULT_CFG["edge_mask_rate_2"]
    mask_mode = DEFAULT_CFG["mask_mode"]

    encoder_dims = DEFAULT_CFG["encoder_dims"]
    decoder_hidden = DEFAULT_CFG["decoder_hidden"]
    final_activation = DEFAULT_CFG["final_activation"]

    lambda_sc = DEFAULT_CFG["lambda_sc"]
    lambda_recon = DEFAULT_CFG["lambda_recon"]
    lambda_pcl = DEFAULT_CFG["lambda_pcl"]
    lambda_ss = DEFAULT_CFG["lambda_ss"]
    tau = DEFAULT_CFG["tau"]
    top_k = DEFAULT_CFG["top_k"]
    warmup_epochs = DEFAULT_CFG["warmup_epochs"]
    pcl_granularities = DEFAULT_CFG["pcl_granularities"]
    pcl_refresh_every = DEFAULT_CFG["pcl_refresh_every"]
    ss_include_self = DEFAULT_CFG["ss_include_self"]
    single_pcl = DEFAULT_CFG["single_pcl"]

    n_clusters = DEFAULT_CFG["n_clusters"]
    kmeans_restarts = DEFAULT_CFG["kmeans_restarts"]
    lr_grid = DEFAULT_CFG["lr_grid"]
    lr_search_criterion = DEFAULT_CFG["lr_search_criterion"]

    inputs = DEFAULT_CFG["inputs"]
    out = DEFAULT_CFG["out"]
    write_imputed = DEFAULT_CFG["write_imputed"]

    def __load_config(self, cfg):
        """
        Charge dynamiquement les hyperparamètres définis dans la configuration du module.
        """
        for field in cfg:
            if hasattr(SpotscapeConfig, field):
                setattr(SpotscapeConfig, field, cfg[field])

    def ready(self):
        """
        Appelé à l'initialisation de l'application.
        Superpose settings.SPOTSCAPE aux valeurs par défaut.
        """
        from django.conf import settings
        cfg = {**DEFAULT_CFG, **getattr(settings, "SPOTSCAPE", {})}
        self.__load_config(cfg)


def module_config():
    """
    Configuration effective du module (défauts + surcharges du projet).
    """
    return {key: getattr(SpotscapeConfig, key) for key in DEFAULT_CFG}
